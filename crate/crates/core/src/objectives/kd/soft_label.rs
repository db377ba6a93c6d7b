use ndarray::{Array2, ArrayView2};

use super::same_shape;
use crate::error::Result;
use crate::objectives::Reduction;
use crate::ops::{log_softmax_rows, softmax_rows};
use crate::scalar::Scalar;

/// Cross-entropy between temperature-softened teacher and student word
/// distributions, reduced over positions (rows).
pub fn soft_label_loss<T: Scalar>(
    teacher_logits: ArrayView2<T>,
    student_logits: ArrayView2<T>,
    temperature: T,
    reduction: Reduction,
) -> Result<T> {
    same_shape(&teacher_logits, &student_logits)?;
    let p = softmax_rows(teacher_logits, temperature);
    let log_q = log_softmax_rows(student_logits, temperature);
    let total = -(&p * &log_q).sum();
    Ok(total / reduction.divisor(teacher_logits.nrows().max(1)))
}

/// Loss plus gradient with respect to the student logits:
/// `(softmax(s / tau) - softmax(t / tau)) / tau`, scaled by the reduction.
pub fn soft_label_loss_with_grad<T: Scalar>(
    teacher_logits: ArrayView2<T>,
    student_logits: ArrayView2<T>,
    temperature: T,
    reduction: Reduction,
) -> Result<(T, Array2<T>)> {
    let loss = soft_label_loss(teacher_logits, student_logits, temperature, reduction)?;
    let div: T = reduction.divisor(teacher_logits.nrows().max(1));
    let p = softmax_rows(teacher_logits, temperature);
    let q = softmax_rows(student_logits, temperature);
    let grad = (q - p).mapv(|g| g / (temperature * div));
    Ok((loss, grad))
}
