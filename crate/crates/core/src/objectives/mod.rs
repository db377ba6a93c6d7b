//! Loss functions for both training stages, each with an analytic gradient.

pub mod kd;
pub mod teacher;
mod xent;

use serde::{Deserialize, Serialize};

pub use xent::{cross_entropy, cross_entropy_with_grad};

/// How per-position losses are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn divisor<T: crate::Scalar>(self, count: usize) -> T {
        match self {
            Reduction::Mean => T::of(count as f64),
            Reduction::Sum => T::one(),
        }
    }
}
