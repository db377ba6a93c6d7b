//! Teacher pretraining objectives: the token-level video-language contrastive
//! hinge loss and masked language modeling.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{cross_entropy, cross_entropy_with_grad, Reduction};
use crate::corpus::MaskedSequence;
use crate::error::{Error, Result};
use crate::ops::{cosine, cosine_with_grad};
use crate::scalar::Scalar;

/// Hinge margin between positive and negative cosine similarities.
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Inputs of the contrastive loss for one positive pair.
///
/// `text` and `neg_text` hold content-token states only (no `[CLS]`). The sum
/// runs over `text` rows; row `i` of the negative text is `min(i, last)`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a, T> {
    pub text: ArrayView2<'a, T>,
    pub neg_text: ArrayView2<'a, T>,
    pub video: ArrayView1<'a, T>,
    pub neg_video: ArrayView1<'a, T>,
    pub margin: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad<T> {
    pub text: Array2<T>,
    pub neg_text: Array2<T>,
    pub video: Array1<T>,
    pub neg_video: Array1<T>,
}

impl<T: Scalar> ContrastiveBatch<'_, T> {
    fn validate(&self) -> Result<()> {
        if self.text.nrows() == 0 || self.neg_text.nrows() == 0 {
            return Err(Error::Empty("contrastive loss needs at least one token per text"));
        }
        if !(self.margin > T::zero()) {
            return Err(Error::InvalidArgument("margin must be positive".into()));
        }
        let d = self.video.len();
        if self.text.ncols() != d || self.neg_text.ncols() != d || self.neg_video.len() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("width {d} for all contrastive inputs"),
                got: format!(
                    "{}, {}, {}",
                    self.text.ncols(),
                    self.neg_text.ncols(),
                    self.neg_video.len()
                ),
            });
        }
        Ok(())
    }

    fn neg_row(&self, i: usize) -> usize {
        i.min(self.neg_text.nrows() - 1)
    }
}

/// The two hinge arguments for every token, `(negative text, negative video)`.
pub fn hinge_arguments<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<Vec<(T, T)>> {
    batch.validate()?;
    (0..batch.text.nrows())
        .map(|i| {
            let pos = cosine(batch.text.row(i), batch.video)?;
            let neg_t = cosine(batch.neg_text.row(batch.neg_row(i)), batch.video)?;
            let neg_v = cosine(batch.text.row(i), batch.neg_video)?;
            Ok((batch.margin - pos + neg_t, batch.margin - pos + neg_v))
        })
        .collect()
}

/// `sum_i max(0, a - cos(x_i, v) + cos(x'_i, v)) + max(0, a - cos(x_i, v) + cos(x_i, v'))`.
pub fn contrastive_hinge_loss<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    Ok(hinge_arguments(batch)?
        .into_iter()
        .map(|(a, b)| a.max(T::zero()) + b.max(T::zero()))
        .sum())
}

pub fn contrastive_hinge_loss_with_grad<T: Scalar>(
    batch: &ContrastiveBatch<T>,
) -> Result<(T, ContrastiveGrad<T>)> {
    batch.validate()?;
    let d = batch.video.len();
    let mut grad = ContrastiveGrad {
        text: Array2::zeros(batch.text.raw_dim()),
        neg_text: Array2::zeros(batch.neg_text.raw_dim()),
        video: Array1::zeros(d),
        neg_video: Array1::zeros(d),
    };
    let mut loss = T::zero();
    for i in 0..batch.text.nrows() {
        let j = batch.neg_row(i);
        let x = batch.text.row(i);
        let (pos, dpos_x, dpos_v) = cosine_with_grad(x, batch.video)?;
        let (neg_t, dnt_x, dnt_v) = cosine_with_grad(batch.neg_text.row(j), batch.video)?;
        let (neg_v, dnv_x, dnv_v) = cosine_with_grad(x, batch.neg_video)?;

        let a = batch.margin - pos + neg_t;
        if a > T::zero() {
            loss = loss + a;
            let mut gx = grad.text.row_mut(i);
            gx -= &dpos_x;
            grad.video -= &dpos_v;
            let mut gn = grad.neg_text.row_mut(j);
            gn += &dnt_x;
            grad.video += &dnt_v;
        }
        let b = batch.margin - pos + neg_v;
        if b > T::zero() {
            loss = loss + b;
            let mut gx = grad.text.row_mut(i);
            gx -= &dpos_x;
            gx += &dnv_x;
            grad.video -= &dpos_v;
            grad.neg_video += &dnv_v;
        }
    }
    Ok((loss, grad))
}

/// Negative log-likelihood of the original tokens at masked positions.
/// `logits` has one row per sequence position.
pub fn mlm_loss<T: Scalar>(
    logits: ArrayView2<T>,
    masked: &MaskedSequence,
    reduction: Reduction,
) -> Result<T> {
    let (rows, targets) = masked_rows(logits, masked)?;
    cross_entropy(rows.view(), &targets, reduction)
}

/// MLM loss and its gradient with respect to the full `logits` matrix.
pub fn mlm_loss_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    masked: &MaskedSequence,
    reduction: Reduction,
) -> Result<(T, Array2<T>)> {
    let (rows, targets) = masked_rows(logits, masked)?;
    let (loss, g) = cross_entropy_with_grad(rows.view(), &targets, reduction)?;
    let mut full = Array2::zeros(logits.raw_dim());
    for (k, &p) in masked.mask_positions.iter().enumerate() {
        full.row_mut(p).assign(&g.row(k));
    }
    Ok((loss, full))
}

fn masked_rows<T: Scalar>(
    logits: ArrayView2<T>,
    masked: &MaskedSequence,
) -> Result<(Array2<T>, Vec<usize>)> {
    if masked.mask_positions.is_empty() {
        return Err(Error::EmptyMask);
    }
    if logits.nrows() != masked.ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logit rows", masked.ids.len()),
            got: logits.nrows().to_string(),
        });
    }
    let rows = logits.select(ndarray::Axis(0), &masked.mask_positions);
    let targets = masked.original_ids.iter().map(|&t| t as usize).collect();
    Ok((rows, targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherWeights {
    pub contrastive: f64,
    pub mlm: f64,
}

impl Default for TeacherWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            mlm: 1.0,
        }
    }
}

/// Weighted sum of the two teacher objectives (unit weights by default).
pub fn teacher_loss<T: Scalar>(contrastive: T, mlm: T, weights: &TeacherWeights) -> T {
    T::of(weights.contrastive) * contrastive + T::of(weights.mlm) * mlm
}
