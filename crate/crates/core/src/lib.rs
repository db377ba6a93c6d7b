//! Two-stage cross-modal knowledge distillation for text encoders.
//!
//! Stage one pretrains a teacher (a text encoder plus a frame encoder) with a
//! token-level video-language contrastive hinge loss and masked language
//! modeling. Stage two freezes the teacher and distills it into a text-only
//! student with any combination of soft-label, L2 regression, NST (kernel
//! MMD), CRD and voken-classification objectives.
//!
//! All numerics are generic over [`Scalar`]; training uses `f32` and gradient
//! verification uses `f64`. Aliases for both live at the crate root.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod eval;
mod error;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod rng;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use params::Parameters;
pub use scalar::Scalar;

pub type Encoder = encoder::EncoderModel<f32>;
pub type Encoder64 = encoder::EncoderModel<f64>;
pub type Hidden = encoder::HiddenStates<f32>;
pub type Hidden64 = encoder::HiddenStates<f64>;
