use ndarray::{Array2, ArrayView2};

use super::Reduction;
use crate::error::{Error, Result};
use crate::ops::{log_softmax_rows, softmax_rows};
use crate::scalar::Scalar;

/// Cross-entropy of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<T> {
    check(logits, targets)?;
    let lp = log_softmax_rows(logits, T::one());
    let total: T = targets.iter().enumerate().map(|(i, &t)| -lp[[i, t]]).sum();
    Ok(total / reduction.divisor(targets.len()))
}

pub fn cross_entropy_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(T, Array2<T>)> {
    let loss = cross_entropy(logits, targets, reduction)?;
    let div: T = reduction.divisor(targets.len());
    let mut grad = softmax_rows(logits, T::one());
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] = grad[[i, t]] - T::one();
    }
    grad.mapv_inplace(|g| g / div);
    Ok((loss, grad))
}

fn check<T: Scalar>(logits: ArrayView2<T>, targets: &[usize]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    if logits.nrows() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logit rows", targets.len()),
            got: logits.nrows().to_string(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.ncols()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: logits.ncols(),
        });
    }
    Ok(())
}
