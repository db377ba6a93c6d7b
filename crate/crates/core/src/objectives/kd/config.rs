use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Reduction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdObjective {
    SoftLabel,
    L2Regression,
    Nst,
    Crd,
    Voken,
}

impl KdObjective {
    pub const ALL: [KdObjective; 5] = [
        KdObjective::SoftLabel,
        KdObjective::L2Regression,
        KdObjective::Nst,
        KdObjective::Crd,
        KdObjective::Voken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KdObjective::SoftLabel => "soft_label",
            KdObjective::L2Regression => "l2_regression",
            KdObjective::Nst => "nst",
            KdObjective::Crd => "crd",
            KdObjective::Voken => "voken",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown KD objective `{s}`")))
    }

    /// Objectives that read the student distillation head output.
    pub fn uses_feature_head(self) -> bool {
        matches!(self, KdObjective::L2Regression | KdObjective::Nst | KdObjective::Crd)
    }
}

/// Which sequence the teacher sees when computing CRD targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrdTeacherInput {
    /// The same masked sequence as the student.
    #[default]
    Same,
    /// The original, unmasked sequence.
    Unmasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub objectives: Vec<KdObjective>,
    /// Per-objective weights; missing entries weigh 1.0.
    pub weights: BTreeMap<KdObjective, f64>,
    /// Soft-label temperature.
    pub temperature: f64,
    /// Gaussian kernel bandwidth for NST.
    pub sigma: f64,
    /// L2-normalize neuron activation columns before the MMD.
    pub nst_normalize: bool,
    /// CRD negatives per positive; `None` uses the batch size.
    pub negatives: Option<usize>,
    /// CRD projection width; `None` uses `max(d / 4, 16)`.
    pub proj_dim: Option<usize>,
    /// CRD memory-buffer momentum; 0 replaces rows outright.
    pub crd_momentum: f64,
    /// Optional temperature dividing the CRD critic score. Off by default.
    pub crd_temperature: Option<f64>,
    pub crd_teacher_input: CrdTeacherInput,
    /// Voken bank size K.
    pub voken_bank_size: usize,
    /// Apply feature KD losses to the distillation head output (otherwise to
    /// raw last hidden states).
    pub distill_head: bool,
    pub reduction: Reduction,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            objectives: vec![KdObjective::Nst, KdObjective::Crd],
            weights: BTreeMap::new(),
            temperature: 2.0,
            sigma: 1.0,
            nst_normalize: true,
            negatives: None,
            proj_dim: None,
            crd_momentum: 0.0,
            crd_temperature: None,
            crd_teacher_input: CrdTeacherInput::Same,
            voken_bank_size: 64,
            distill_head: true,
            reduction: Reduction::Mean,
        }
    }
}

impl KdConfig {
    pub fn with_objectives(objectives: &[KdObjective]) -> Self {
        Self {
            objectives: objectives.to_vec(),
            ..Self::default()
        }
    }

    pub fn enabled(&self, o: KdObjective) -> bool {
        self.objectives.contains(&o)
    }

    pub fn weight(&self, o: KdObjective) -> f64 {
        self.weights.get(&o).copied().unwrap_or(1.0)
    }

    pub fn proj_dim_for(&self, d: usize) -> usize {
        self.proj_dim.unwrap_or((d / 4).max(16))
    }

    pub fn negatives_for(&self, batch_size: usize) -> usize {
        self.negatives.unwrap_or(batch_size)
    }

    /// Checks the parameter ranges; `dataset_size` is M.
    pub fn validate(&self, batch_size: usize, dataset_size: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.crd_momentum) {
            return Err(Error::Config("crd_momentum must lie in [0, 1)".into()));
        }
        if self.enabled(KdObjective::Crd) {
            let n = self.negatives_for(batch_size);
            if n == 0 || n >= dataset_size {
                return Err(Error::InsufficientNegatives {
                    negatives: n,
                    dataset: dataset_size,
                });
            }
        }
        if self.enabled(KdObjective::Voken) && self.voken_bank_size < 2 {
            return Err(Error::Config("voken_bank_size must be at least 2".into()));
        }
        Ok(())
    }
}
