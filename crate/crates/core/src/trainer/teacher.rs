use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sum_in_order, ModelSpec, Stage, StepLog};
use crate::corpus::{apply_mlm_mask, batch_for_step, MaskPolicy, MaskedSequence, PairedSample};
use crate::encoder::{pool_video, EncoderCache, EncoderModel, HiddenStates};
use crate::error::{Error, Result};
use crate::objectives::teacher::{
    contrastive_hinge_loss_with_grad, mlm_loss_with_grad, ContrastiveBatch, TeacherWeights,
    DEFAULT_MARGIN,
};
use crate::objectives::Reduction;
use crate::ops::scatter_rows_add;
use crate::optim::{first_non_finite, AdamW, AdamWConfig};
use crate::params::{join, Parameters};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherRunConfig {
    pub model: ModelSpec,
    pub batch_size: usize,
    pub steps: u64,
    pub optim: AdamWConfig,
    pub margin: f64,
    pub weights: TeacherWeights,
    pub mask: MaskPolicy,
    pub mlm_reduction: Reduction,
}

impl Default for TeacherRunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            batch_size: 16,
            steps: 200,
            optim: AdamWConfig::default(),
            margin: DEFAULT_MARGIN,
            weights: TeacherWeights::default(),
            mask: MaskPolicy::default(),
            mlm_reduction: Reduction::Mean,
        }
    }
}

impl TeacherRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "teacher batch_size must be at least 2 for in-batch negatives".into(),
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        self.optim.validate()
    }
}

/// The video-language teacher: a text encoder and a frame encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel<T> {
    pub text: EncoderModel<T>,
    pub video: EncoderModel<T>,
}

impl<T: Scalar> Parameters<T> for TeacherModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.text.visit(&join(prefix, "text"), f);
        self.video.visit(&join(prefix, "video"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.video.visit_mut(&join(prefix, "video"), f);
    }
}

impl<T: Scalar> TeacherModel<T> {
    /// Fresh text and frame encoders, both trained from scratch.
    pub fn init(spec: &ModelSpec, vocab_size: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let text_cfg = spec.text_config(vocab_size)?;
        let video_cfg = text_cfg.as_video(feature_dim);
        Ok(Self {
            text: EncoderModel::init(text_cfg, &mut rng::derive(seed, &[stream::INIT, 0]))?,
            video: EncoderModel::init(video_cfg, &mut rng::derive(seed, &[stream::INIT, 1]))?,
        })
    }
}

struct SampleForward {
    text: Option<(HiddenStates<f32>, EncoderCache<f32>)>,
    video: Option<(HiddenStates<f32>, EncoderCache<f32>, Array1<f32>)>,
    masked_states: Array2<f32>,
    masked_cache: EncoderCache<f32>,
    mlm: f32,
    dlogits: Array2<f32>,
}

pub struct TeacherTrainer<'a> {
    pub model: TeacherModel<f32>,
    pub optim: AdamW<TeacherModel<f32>>,
    pub cfg: TeacherRunConfig,
    pub seed: u64,
    data: &'a [PairedSample],
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(
        cfg: TeacherRunConfig,
        seed: u64,
        data: &'a [PairedSample],
        vocab_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let feature_dim = data.first().ok_or(Error::Empty("paired dataset"))?.video.dim();
        let model = TeacherModel::init(&cfg.model, vocab_size, feature_dim, seed)?;
        Self::resume(cfg, seed, data, model, None)
    }

    /// Continues from saved parameters and (optionally) optimizer state.
    pub fn resume(
        cfg: TeacherRunConfig,
        seed: u64,
        data: &'a [PairedSample],
        model: TeacherModel<f32>,
        optim: Option<AdamW<TeacherModel<f32>>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.len() < 2 {
            return Err(Error::InvalidArgument("teacher training needs at least 2 pairs".into()));
        }
        let optim = optim.unwrap_or_else(|| AdamW::new(&model, cfg.optim.clone()));
        Ok(Self {
            model,
            optim,
            cfg,
            seed,
            data,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    fn stage_seed(&self) -> u64 {
        rng::sub_seed(self.seed, &[stream::TEACHER_STAGE])
    }

    /// One optimizer step. On error nothing has been modified, so the current
    /// parameters are the last good state.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.optim.step;
        let seed = self.stage_seed();
        let batch = batch_for_step(self.data.len(), self.cfg.batch_size, seed, step as usize);
        let b = batch.len();
        let use_ct = self.cfg.weights.contrastive != 0.0;
        let vocab = self.model.text.config.vocab_size;

        let masked: Vec<MaskedSequence> = batch
            .iter()
            .enumerate()
            .map(|(p, &i)| {
                let mut r = rng::derive(seed, &[stream::MASK, step, p as u64]);
                apply_mlm_mask(&self.data[i].text, &self.cfg.mask, vocab, &mut r)
            })
            .collect::<Result<_>>()?;
        // One negative text and one negative video per sample, each drawn
        // uniformly from the rest of the batch.
        let negatives: Vec<(usize, usize)> = (0..b)
            .map(|p| {
                let mut r = rng::derive(seed, &[stream::NEGATIVES, step, p as u64]);
                let jt = (p + 1 + r.random_range(0..b - 1)) % b;
                let jv = (p + 1 + r.random_range(0..b - 1)) % b;
                (jt, jv)
            })
            .collect();

        let model = &self.model;
        let data = self.data;
        let reduction = self.cfg.mlm_reduction;
        let fwd: Vec<SampleForward> = (0..b)
            .into_par_iter()
            .map(|p| {
                let sample = &data[batch[p]];
                let text = if use_ct {
                    Some(model.text.forward_tokens(&sample.text.ids, &sample.text.pad_mask)?)
                } else {
                    None
                };
                let video = if use_ct {
                    let (h, c) = model.video.forward_frames(&sample.video.frames)?;
                    let pooled = pool_video(&h)?;
                    Some((h, c, pooled))
                } else {
                    None
                };
                let m = &masked[p];
                let (mh, masked_cache) = model.text.forward_tokens(&m.ids, &m.pad_mask)?;
                let logits = model.text.lm_logits(&mh.states)?;
                let (mlm, dlogits) = mlm_loss_with_grad(logits.view(), m, reduction)?;
                Ok(SampleForward {
                    text,
                    video,
                    masked_states: mh.states,
                    masked_cache,
                    mlm,
                    dlogits,
                })
            })
            .collect::<Result<_>>()?;

        let w_ct = self.cfg.weights.contrastive as f32;
        let w_mlm = self.cfg.weights.mlm as f32;
        let inv_b = 1.0 / b as f32;
        let margin = self.cfg.margin as f32;

        // Contrastive gradients land on the sample's own states and on the
        // states of whichever batch members served as its negatives.
        let mut d_text: Vec<Option<Array2<f32>>> = vec![None; b];
        let mut d_pool: Vec<Option<Array1<f32>>> = vec![None; b];
        let mut ct_total = 0.0f64;
        if use_ct {
            let content: Vec<Array2<f32>> = fwd
                .iter()
                .map(|f| f.text.as_ref().expect("computed").0.content_states())
                .collect();
            for p in 0..b {
                let (jt, jv) = negatives[p];
                let pooled = |k: usize| &fwd[k].video.as_ref().expect("computed").2;
                let cb = ContrastiveBatch {
                    text: content[p].view(),
                    neg_text: content[jt].view(),
                    video: pooled(p).view(),
                    neg_video: pooled(jv).view(),
                    margin,
                };
                let (loss, g) = contrastive_hinge_loss_with_grad(&cb)?;
                ct_total += loss as f64;
                let scale = w_ct * inv_b;
                let mask_of = |k: usize| &fwd[k].text.as_ref().expect("computed").0.content;
                for (k, gk) in [(p, g.text), (jt, g.neg_text)] {
                    let slot = d_text[k].get_or_insert_with(|| {
                        Array2::zeros(fwd[k].text.as_ref().expect("computed").0.states.raw_dim())
                    });
                    scatter_rows_add(slot, mask_of(k), (gk * scale).view());
                }
                for (k, gk) in [(p, g.video), (jv, g.neg_video)] {
                    let slot = d_pool[k].get_or_insert_with(|| Array1::zeros(gk.len()));
                    slot.scaled_add(scale, &gk);
                }
            }
        }
        let mlm_total: f64 = fwd.iter().map(|f| f.mlm as f64).sum();
        let ct_mean = ct_total / b as f64;
        let mlm_mean = mlm_total / b as f64;
        let total = self.cfg.weights.contrastive * ct_mean + self.cfg.weights.mlm * mlm_mean;
        if !total.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }

        let grads: Vec<TeacherModel<f32>> = (0..b)
            .into_par_iter()
            .map(|p| {
                let f = &fwd[p];
                let mut g = model.zeroed();
                let dl = &f.dlogits * (w_mlm * inv_b);
                let dh = model.text.lm_backward(&f.masked_states, &dl, &mut g.text);
                model.text.backward(&f.masked_cache, &dh, &mut g.text);
                if let (Some(dt), Some((_, cache))) = (&d_text[p], &f.text) {
                    model.text.backward(cache, dt, &mut g.text);
                }
                if let (Some(dp), Some((h, cache, _))) = (&d_pool[p], &f.video) {
                    let n = h.states.nrows();
                    let rows = (dp / n as f32).insert_axis(Axis(0));
                    let ds = rows.broadcast(h.states.raw_dim()).expect("row broadcast").to_owned();
                    model.video.backward(cache, &ds, &mut g.video);
                }
                g
            })
            .collect();
        let grad = sum_in_order(grads);
        if let Some(name) = first_non_finite(&grad) {
            return Err(Error::NonFiniteGradient(name));
        }
        let stats = self.optim.update(&mut self.model, &grad)?;

        let mut losses = BTreeMap::new();
        losses.insert("contrastive".to_string(), ct_mean);
        losses.insert("mlm".to_string(), mlm_mean);
        losses.insert("total".to_string(), total);
        Ok(StepLog {
            step: self.optim.step,
            stage: Stage::Teacher,
            losses,
            lr: stats.lr,
            seed: self.seed,
        })
    }

    /// Runs until `cfg.steps` updates have been applied, passing each log to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.optim.step < self.cfg.steps {
            let log = self.step()?;
            on_step(&log);
        }
        Ok(())
    }
}
