//! Stage-1 teacher pretraining and stage-2 frozen-teacher distillation.

mod persist;
mod student;
mod teacher;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::Result;

pub use persist::{
    load_checkpoint_meta, load_student, load_teacher, save_student, save_teacher, CheckpointMeta, StudentCheckpoint,
    TeacherCheckpoint,
};
pub use student::{build_voken_bank, StudentModel, StudentRunConfig, StudentTrainer};
pub use teacher::{TeacherModel, TeacherRunConfig, TeacherTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Student,
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub seed: u64,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("step log serializes")
    }
}

/// An encoder shape: a named preset with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub preset: String,
    pub n_layers: Option<usize>,
    pub d_hidden: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            preset: "toy-2L-64H".into(),
            n_layers: None,
            d_hidden: None,
            n_heads: None,
            d_ff: None,
        }
    }
}

impl ModelSpec {
    pub fn text_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let mut c = EncoderConfig::preset(&self.preset, vocab_size)?;
        if let Some(v) = self.n_layers {
            c.n_layers = v;
        }
        if let Some(v) = self.d_hidden {
            c.d_hidden = v;
        }
        if let Some(v) = self.n_heads {
            c.n_heads = v;
        }
        if let Some(v) = self.d_ff {
            c.d_ff = v;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Sums per-sample gradients in batch order so the result does not depend on
/// how the per-sample work was scheduled across threads.
fn sum_in_order<T: crate::Scalar, P: crate::Parameters<T>>(mut parts: Vec<P>) -> P {
    let mut iter = parts.drain(..);
    let mut total = iter.next().expect("batch has at least two samples");
    for g in iter {
        total.add_assign(&g);
    }
    total
}
