//! Transformer encoders for text and frame features, with LM, distillation
//! and voken heads.

mod config;
pub mod layers;
mod model;

pub use config::{EncoderConfig, TEXT_POSITIONS, VIDEO_POSITIONS};
pub use model::{
    pool_video, DistillCache, DistillHead, EncoderCache, EncoderModel, HiddenStates, InputLayer,
    LmHead, TokenInput,
};

#[cfg(test)]
mod tests;
