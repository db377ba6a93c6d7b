//! Small vector kernels (cosine, softmax, normalization) with their hand-derived
//! backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn dot<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b)
}

pub fn norm<T: Scalar>(a: ArrayView1<T>) -> T {
    a.dot(&a).sqrt()
}

/// Cosine similarity; a zero-norm operand is an error rather than NaN.
pub fn cosine<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<T> {
    let (na, nb) = (norm(a), norm(b));
    if na <= T::zero() || nb <= T::zero() || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Cosine plus its partial derivatives with respect to both operands.
pub fn cosine_with_grad<T: Scalar>(
    a: ArrayView1<T>,
    b: ArrayView1<T>,
) -> Result<(T, Array1<T>, Array1<T>)> {
    let (na, nb) = (norm(a), norm(b));
    if na <= T::zero() || nb <= T::zero() || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let c = a.dot(&b) / (na * nb);
    let inv = T::one() / (na * nb);
    let da = &b * inv - &a * (c / (na * na));
    let db = &a * inv - &b * (c / (nb * nb));
    Ok((c, da, db))
}

/// Row-wise softmax of `x / temperature`.
pub fn softmax_rows<T: Scalar>(x: ArrayView2<T>, temperature: T) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let mut sum = T::zero();
        row.mapv_inplace(|v| {
            let e = (v / temperature - max).exp();
            sum = sum + e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax of `x / temperature`.
pub fn log_softmax_rows<T: Scalar>(x: ArrayView2<T>, temperature: T) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let lse = row
            .iter()
            .map(|&v| (v / temperature - max).exp())
            .sum::<T>()
            .ln()
            + max;
        row.mapv_inplace(|v| v / temperature - lse);
    }
    out
}

/// `x / ||x||` and the norm, so the backward pass can reuse it.
pub fn l2_normalize<T: Scalar>(x: ArrayView1<T>) -> Result<(Array1<T>, T)> {
    let n = norm(x);
    if n <= T::zero() || !n.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((x.mapv(|v| v / n), n))
}

/// Backward of `y = x / ||x||` given the normalized output and the norm.
pub fn l2_normalize_backward<T: Scalar>(y: ArrayView1<T>, n: T, dy: ArrayView1<T>) -> Array1<T> {
    let proj = y.dot(&dy);
    (&dy - &(&y * proj)) / n
}

/// Mean of the rows selected by `mask`.
pub fn masked_row_mean<T: Scalar>(x: ArrayView2<T>, mask: &[bool]) -> Result<Array1<T>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Empty("no rows selected for mean"));
    }
    let mut acc = Array1::zeros(x.ncols());
    for (row, _) in x.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        acc += &row;
    }
    Ok(acc / T::of(count as f64))
}

/// Gathers the rows flagged in `mask` into a new matrix.
pub fn select_rows<T: Scalar>(x: ArrayView2<T>, mask: &[bool]) -> Array2<T> {
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    x.select(Axis(0), &idx)
}

/// Adds the rows of `src` into the rows of `dst` flagged in `mask`, in order.
pub fn scatter_rows_add<T: Scalar>(dst: &mut Array2<T>, mask: &[bool], src: ArrayView2<T>) {
    let mut k = 0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let mut row = dst.row_mut(i);
            row += &src.row(k);
            k += 1;
        }
    }
    debug_assert_eq!(k, src.nrows());
}

pub fn all_finite<T: Scalar>(x: &[T]) -> bool {
    x.iter().all(|v| v.is_finite())
}
