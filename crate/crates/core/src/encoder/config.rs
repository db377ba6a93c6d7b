use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// |Z|; ignored by frame encoders.
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Frame feature width d_v. `Some` makes this a frame (video) encoder.
    #[serde(default)]
    pub input_dim: Option<usize>,
    #[serde(default = "yes")]
    pub tie_lm_head: bool,
    #[serde(default)]
    pub lm_head: bool,
    /// Output width of the two-layer distillation MLP, when present.
    #[serde(default)]
    pub distill_dim: Option<usize>,
    /// Number of voken classes K, when a voken head is present.
    #[serde(default)]
    pub voken_classes: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn yes() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// 1 `[CLS]` + 128 content positions.
pub const TEXT_POSITIONS: usize = 129;
pub const VIDEO_POSITIONS: usize = 512;

impl EncoderConfig {
    /// Named shape presets: `toy-2L-64H`, `bert-6L-512H`, `bert-12L-768H`.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (n_layers, d_hidden, n_heads, d_ff) = match name {
            "toy-2L-64H" => (2, 64, 4, 256),
            "bert-6L-512H" => (6, 512, 8, 2048),
            "bert-12L-768H" => (12, 768, 12, 3072),
            other => return Err(Error::Config(format!("unknown encoder preset `{other}`"))),
        };
        Ok(Self {
            n_layers,
            d_hidden,
            n_heads,
            d_ff,
            vocab_size,
            max_positions: TEXT_POSITIONS,
            input_dim: None,
            tie_lm_head: true,
            lm_head: true,
            distill_dim: None,
            voken_classes: None,
            ln_eps: default_ln_eps(),
        })
    }

    /// The same shape family as a frame encoder over `d_v`-wide features.
    pub fn as_video(&self, d_v: usize) -> Self {
        Self {
            input_dim: Some(d_v),
            max_positions: VIDEO_POSITIONS,
            lm_head: false,
            distill_dim: None,
            voken_classes: None,
            ..self.clone()
        }
    }

    pub fn is_video(&self) -> bool {
        self.input_dim.is_some()
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_hidden {} is not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if self.d_hidden == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.is_video() && self.vocab_size <= crate::corpus::Vocabulary::NUM_SPECIAL {
            return Err(Error::Config("text encoder needs a non-trivial vocabulary".into()));
        }
        if let Some(k) = self.voken_classes {
            if k < 2 {
                return Err(Error::Config("voken head needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}
