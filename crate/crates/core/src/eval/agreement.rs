use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean_l2: f64,
    pub mean_cosine: f64,
    pub positions: usize,
}

/// Token-level agreement over all content positions of `texts`. The student
/// side goes through its distillation head when it has one and `use_head`.
pub fn agreement_metrics<T: Scalar>(
    student: &EncoderModel<T>,
    teacher: &EncoderModel<T>,
    texts: &[TokenSequence],
    use_head: bool,
) -> Result<Agreement> {
    let per_text: Vec<(f64, f64, usize)> = texts
        .par_iter()
        .map(|seq| {
            let s = student.encode_text(seq)?.content_states();
            let s = if use_head && student.distill_head.is_some() { student.distill(&s)?.0 } else { s };
            let t = teacher.encode_text(seq)?.content_states();
            if s.dim() != t.dim() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", t.dim()),
                    got: format!("{:?}", s.dim()),
                });
            }
            let mut l2 = 0.0;
            let mut cos = 0.0;
            for (a, b) in s.rows().into_iter().zip(t.rows()) {
                let a = a.mapv(|v| v.to_f64_lossy());
                let b = b.mapv(|v| v.to_f64_lossy());
                let d = &a - &b;
                l2 += d.dot(&d).sqrt();
                let denom = a.dot(&a).sqrt() * b.dot(&b).sqrt();
                cos += if denom > 0.0 { a.dot(&b) / denom } else { 0.0 };
            }
            Ok((l2, cos, s.nrows()))
        })
        .collect::<Result<_>>()?;
    let n: usize = per_text.iter().map(|p| p.2).sum();
    if n == 0 {
        return Err(Error::Empty("agreement needs at least one content token"));
    }
    Ok(Agreement {
        mean_l2: per_text.iter().map(|p| p.0).sum::<f64>() / n as f64,
        mean_cosine: per_text.iter().map(|p| p.1).sum::<f64>() / n as f64,
        positions: n,
    })
}
