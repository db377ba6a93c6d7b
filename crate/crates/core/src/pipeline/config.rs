use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::trainer::{StudentRunConfig, TeacherRunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Retrieval list length.
    pub k: usize,
    pub probe_train: usize,
    pub probe_test: usize,
    /// Held-out sentences written by `gen-synth` for agreement metrics.
    pub heldout_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            probe_train: 256,
            probe_test: 256,
            heldout_sentences: 128,
        }
    }
}

/// One run's full configuration. Every key is optional in the JSON file and
/// unknown keys are rejected with their name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub teacher: TeacherRunConfig,
    pub student: StudentRunConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.teacher.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        Ok(())
    }
}
