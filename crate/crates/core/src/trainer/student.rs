use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sum_in_order, ModelSpec, Stage, StepLog, TeacherModel};
use crate::corpus::{apply_mlm_mask, batch_for_step, MaskPolicy, MaskedSequence, PairedSample, TokenSequence};
use crate::encoder::{pool_video, EncoderModel};
use crate::error::{Error, Result};
use crate::objectives::kd::{
    assign_vokens, combined_student_loss, crd_loss_with_grad, draw_negatives,
    l2_regression_loss_with_grad, nst_mmd2_with_grad, select_bank_members,
    soft_label_loss_with_grad, voken_loss_with_grad, CrdState, CrdTeacherInput, KdConfig,
    KdObjective, VokenBank,
};
use crate::objectives::teacher::mlm_loss_with_grad;
use crate::objectives::Reduction;
use crate::ops::{masked_row_mean, scatter_rows_add, select_rows};
use crate::optim::{first_non_finite, AdamW, AdamWConfig};
use crate::params::{join, Parameters};
use crate::rng::{self, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentRunConfig {
    pub model: ModelSpec,
    pub batch_size: usize,
    pub steps: u64,
    pub optim: AdamWConfig,
    pub mask: MaskPolicy,
    pub mlm_reduction: Reduction,
    pub kd: KdConfig,
}

impl Default for StudentRunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            batch_size: 16,
            steps: 1000,
            optim: AdamWConfig::default(),
            mask: MaskPolicy::default(),
            mlm_reduction: Reduction::Mean,
            kd: KdConfig::default(),
        }
    }
}

impl StudentRunConfig {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("student batch_size must be at least 2".into()));
        }
        self.optim.validate()?;
        self.kd.validate(self.batch_size, dataset_size)
    }

    /// Whether the student carries the MLP head used by feature-space losses.
    pub fn uses_distill_head(&self) -> bool {
        self.kd.distill_head && self.kd.objectives.iter().any(|o| o.uses_feature_head())
    }
}

/// The text-only student plus the trainable CRD projections.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel<T> {
    pub text: EncoderModel<T>,
    pub crd: Option<CrdState<T>>,
}

impl<T: Scalar> Parameters<T> for StudentModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.text.visit(&join(prefix, "text"), f);
        self.crd.visit(&join(prefix, "crd"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.crd.visit_mut(&join(prefix, "crd"), f);
    }
}

impl StudentModel<f32> {
    /// A freshly initialized student. `teacher_dim` sizes the distillation
    /// head output and the teacher side of CRD.
    pub fn init(
        cfg: &StudentRunConfig,
        vocab_size: usize,
        teacher_dim: usize,
        voken_classes: Option<usize>,
        dataset_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut text_cfg = cfg.model.text_config(vocab_size)?;
        if cfg.uses_distill_head() {
            text_cfg.distill_dim = Some(teacher_dim);
        }
        if cfg.kd.enabled(KdObjective::Voken) {
            text_cfg.voken_classes =
                Some(voken_classes.ok_or_else(|| Error::Config("voken KD enabled without a voken bank".into()))?);
        }
        let text = EncoderModel::init(text_cfg, &mut rng::derive(seed, &[stream::INIT, 0]))?;
        let feature_dim = if cfg.uses_distill_head() { teacher_dim } else { text.d_hidden() };
        let crd = cfg.kd.enabled(KdObjective::Crd).then(|| {
            CrdState::init(
                &mut rng::derive(seed, &[stream::INIT, 2]),
                feature_dim,
                teacher_dim,
                cfg.kd.proj_dim_for(teacher_dim),
                dataset_size,
                cfg.kd.crd_momentum,
            )
        });
        Ok(Self { text, crd })
    }

    /// Student-side features for the feature-space losses on `content` rows.
    pub fn features(&self, content: &Array2<f32>) -> Result<Array2<f32>> {
        if self.text.distill_head.is_some() {
            Ok(self.text.distill(content)?.0)
        } else {
            Ok(content.clone())
        }
    }
}

/// Pooled teacher video representations for `k` samples chosen with
/// [`select_bank_members`]; `clusters` labels every sample.
pub fn build_voken_bank(
    teacher: &TeacherModel<f32>,
    samples: &[PairedSample],
    clusters: &[usize],
    k: usize,
    seed: u64,
) -> Result<VokenBank<f32>> {
    let members = select_bank_members(clusters, k, &mut rng::derive(seed, &[stream::BANK]))?;
    let rows: Vec<Array1<f32>> = members
        .par_iter()
        .map(|&i| pool_video(&teacher.video.encode_video(&samples[i].video)?))
        .collect::<Result<_>>()?;
    let mut vectors = Array2::zeros((rows.len(), teacher.video.d_hidden()));
    for (mut dst, r) in vectors.rows_mut().into_iter().zip(&rows) {
        dst.assign(r);
    }
    let ids = members.iter().map(|&i| samples[i].video.source_id.clone()).collect();
    VokenBank::new(vectors, ids)
}

struct SampleOutcome {
    mlm: f32,
    kd: BTreeMap<KdObjective, f32>,
    grad: StudentModel<f32>,
    buffer_row: Option<Array1<f32>>,
}

pub struct StudentTrainer<'a> {
    pub model: StudentModel<f32>,
    pub optim: AdamW<StudentModel<f32>>,
    pub cfg: StudentRunConfig,
    pub seed: u64,
    teacher: Option<&'a TeacherModel<f32>>,
    pub bank: Option<VokenBank<f32>>,
    data: &'a [TokenSequence],
}

impl<'a> StudentTrainer<'a> {
    /// A fresh student. `teacher` may be omitted only when no KD objective is
    /// enabled; it is only ever read.
    pub fn new(
        cfg: StudentRunConfig,
        seed: u64,
        teacher: Option<&'a TeacherModel<f32>>,
        bank: Option<VokenBank<f32>>,
        data: &'a [TokenSequence],
        vocab_size: usize,
    ) -> Result<Self> {
        let teacher_dim = match teacher {
            Some(t) => t.text.d_hidden(),
            None => cfg.model.text_config(vocab_size)?.d_hidden,
        };
        let stage = rng::sub_seed(seed, &[stream::STUDENT_STAGE]);
        let model = StudentModel::init(
            &cfg,
            vocab_size,
            teacher_dim,
            bank.as_ref().map(|b| b.len()),
            data.len(),
            stage,
        )?;
        Self::resume(cfg, seed, teacher, bank, data, model, None)
    }

    pub fn resume(
        cfg: StudentRunConfig,
        seed: u64,
        teacher: Option<&'a TeacherModel<f32>>,
        bank: Option<VokenBank<f32>>,
        data: &'a [TokenSequence],
        model: StudentModel<f32>,
        optim: Option<AdamW<StudentModel<f32>>>,
    ) -> Result<Self> {
        cfg.validate(data.len())?;
        if !cfg.kd.objectives.is_empty() && teacher.is_none() {
            return Err(Error::Config("KD objectives need a teacher".into()));
        }
        if cfg.kd.enabled(KdObjective::Voken) {
            let b = bank.as_ref().ok_or_else(|| Error::Config("voken KD enabled without a voken bank".into()))?;
            b.validate()?;
        }
        if let Some(t) = teacher {
            if t.text.config.vocab_size != model.text.config.vocab_size {
                return Err(Error::Config("student and teacher vocabularies differ".into()));
            }
            let feature_dim = if model.text.distill_head.is_some() {
                t.text.d_hidden()
            } else {
                model.text.d_hidden()
            };
            if cfg.kd.enabled(KdObjective::L2Regression) && feature_dim != t.text.d_hidden() {
                return Err(Error::Config(
                    "L2 regression without a distillation head needs equal hidden sizes".into(),
                ));
            }
        }
        if data.len() < 2 {
            return Err(Error::InvalidArgument("distillation needs at least 2 sentences".into()));
        }
        let optim = optim.unwrap_or_else(|| AdamW::new(&model, cfg.optim.clone()));
        Ok(Self {
            model,
            optim,
            cfg,
            seed,
            teacher,
            bank,
            data,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    fn stage_seed(&self) -> u64 {
        rng::sub_seed(self.seed, &[stream::STUDENT_STAGE])
    }

    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        masked: &MaskedSequence,
        sample_index: usize,
        negatives: &[usize],
    ) -> Result<SampleOutcome> {
        let model = &self.model;
        let kd = &self.cfg.kd;
        let red = kd.reduction;
        let (h, cache) = model.text.forward_tokens(&masked.ids, &masked.pad_mask)?;
        let logits = model.text.lm_logits(&h.states)?;
        let (mlm, mut dlogits) = mlm_loss_with_grad(logits.view(), masked, self.cfg.mlm_reduction)?;
        let content = &h.content;
        let s_content = select_rows(h.states.view(), content);

        let mut grad = model.zeroed();
        let mut losses = BTreeMap::new();
        let mut buffer_row = None;
        let mut d_content = Array2::<f32>::zeros(s_content.raw_dim());

        if let Some(teacher) = self.teacher.filter(|_| !kd.objectives.is_empty()) {
            let th = teacher.text.encode_text(masked)?;
            let t_content = th.content_states();
            let w = |o: KdObjective| kd.weight(o) as f32;

            if kd.enabled(KdObjective::SoftLabel) {
                let t_logits = teacher.text.lm_logits(&t_content)?;
                let s_logits = select_rows(logits.view(), content);
                let (l, g) = soft_label_loss_with_grad(
                    t_logits.view(),
                    s_logits.view(),
                    kd.temperature as f32,
                    red,
                )?;
                losses.insert(KdObjective::SoftLabel, l);
                scatter_rows_add(&mut dlogits, content, (g * w(KdObjective::SoftLabel)).view());
            }

            let feature_objectives = [KdObjective::L2Regression, KdObjective::Nst, KdObjective::Crd];
            if feature_objectives.iter().any(|&o| kd.enabled(o)) {
                let head = model.text.distill_head.as_ref().map(|_| model.text.distill(&s_content)).transpose()?;
                let feats = head.as_ref().map_or(&s_content, |(f, _)| f);
                let mut d_feat = Array2::<f32>::zeros(feats.raw_dim());
                if kd.enabled(KdObjective::L2Regression) {
                    let (l, g) = l2_regression_loss_with_grad(feats.view(), t_content.view(), red)?;
                    losses.insert(KdObjective::L2Regression, l);
                    d_feat.scaled_add(w(KdObjective::L2Regression), &g);
                }
                if kd.enabled(KdObjective::Nst) {
                    let (l, g) =
                        nst_mmd2_with_grad(feats.view(), t_content.view(), kd.sigma as f32, kd.nst_normalize)?;
                    losses.insert(KdObjective::Nst, l);
                    d_feat.scaled_add(w(KdObjective::Nst), &g);
                }
                if kd.enabled(KdObjective::Crd) {
                    let state = model.crd.as_ref().expect("CRD state exists when enabled");
                    let t_crd = match kd.crd_teacher_input {
                        CrdTeacherInput::Same => t_content.clone(),
                        CrdTeacherInput::Unmasked => teacher.text.encode_text(&masked.source())?.content_states(),
                    };
                    let (l, g) = crd_loss_with_grad(
                        feats.view(),
                        t_crd.view(),
                        sample_index,
                        negatives,
                        state,
                        kd.crd_temperature.map(|t| t as f32),
                        red,
                    )?;
                    losses.insert(KdObjective::Crd, l);
                    d_feat.scaled_add(w(KdObjective::Crd), &g.student);
                    let mut gp = g.proj;
                    gp.scale(w(KdObjective::Crd));
                    grad.crd.as_mut().expect("grad mirrors model").proj.add_assign(&gp);
                    let pooled = masked_row_mean(t_crd.view(), &vec![true; t_crd.nrows()])?;
                    buffer_row = Some(state.embed_teacher(pooled.view())?);
                }
                match &head {
                    Some((_, dc)) => d_content += &model.text.distill_backward(dc, &d_feat, &mut grad.text),
                    None => d_content += &d_feat,
                }
            }

            if kd.enabled(KdObjective::Voken) {
                let bank = self.bank.as_ref().expect("checked at construction");
                let assignment = assign_vokens(t_content.view(), bank)?;
                let v_logits = model.text.voken_logits(&s_content)?;
                let (l, g) = voken_loss_with_grad(v_logits.view(), &assignment, red)?;
                losses.insert(KdObjective::Voken, l);
                d_content += &model.text.voken_backward(&s_content, &(g * w(KdObjective::Voken)), &mut grad.text);
            }
        }

        let mut d_states = model.text.lm_backward(&h.states, &dlogits, &mut grad.text);
        scatter_rows_add(&mut d_states, content, d_content.view());
        model.text.backward(&cache, &d_states, &mut grad.text);
        Ok(SampleOutcome {
            mlm,
            kd: losses,
            grad,
            buffer_row,
        })
    }

    /// One optimizer step; the CRD buffer is written after the update, so all
    /// reads within a step see the previous step's buffer.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.optim.step;
        let seed = self.stage_seed();
        let m = self.data.len();
        let batch = batch_for_step(m, self.cfg.batch_size, seed, step as usize);
        let b = batch.len();
        let vocab = self.model.text.config.vocab_size;
        let masked: Vec<MaskedSequence> = batch
            .iter()
            .enumerate()
            .map(|(p, &i)| {
                apply_mlm_mask(
                    &self.data[i],
                    &self.cfg.mask,
                    vocab,
                    &mut rng::derive(seed, &[stream::MASK, step, p as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let negatives: Vec<Vec<usize>> = if self.cfg.kd.enabled(KdObjective::Crd) {
            let n = self.cfg.kd.negatives_for(self.cfg.batch_size);
            batch
                .iter()
                .enumerate()
                .map(|(p, &i)| draw_negatives(&mut rng::derive(seed, &[stream::CRD, step, p as u64]), i, n, m))
                .collect::<Result<_>>()?
        } else {
            vec![Vec::new(); b]
        };

        let outcomes: Vec<SampleOutcome> = (0..b)
            .into_par_iter()
            .map(|p| self.sample(&masked[p], batch[p], &negatives[p]))
            .collect::<Result<_>>()?;

        let inv_b = 1.0 / b as f64;
        let mlm_mean: f64 = outcomes.iter().map(|o| o.mlm as f64).sum::<f64>() * inv_b;
        let mut kd_means: BTreeMap<KdObjective, f64> = BTreeMap::new();
        for o in &outcomes {
            for (&k, &v) in &o.kd {
                *kd_means.entry(k).or_default() += v as f64 * inv_b;
            }
        }
        let total = combined_student_loss(mlm_mean, &kd_means, &self.cfg.kd)?;
        if !total.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }

        let mut buffer_rows = Vec::with_capacity(b);
        let mut grads = Vec::with_capacity(b);
        for (p, o) in outcomes.into_iter().enumerate() {
            buffer_rows.push((batch[p], o.buffer_row));
            grads.push(o.grad);
        }
        let mut grad = sum_in_order(grads);
        grad.scale(inv_b as f32);
        if let Some(name) = first_non_finite(&grad) {
            return Err(Error::NonFiniteGradient(name));
        }
        let stats = self.optim.update(&mut self.model, &grad)?;
        if let Some(state) = self.model.crd.as_mut() {
            for (i, row) in buffer_rows {
                if let Some(row) = row {
                    state.store(i, row.view())?;
                }
            }
        }

        let mut losses: BTreeMap<String, f64> =
            kd_means.iter().map(|(k, &v)| (k.name().to_string(), v)).collect();
        losses.insert("mlm".into(), mlm_mean);
        losses.insert("total".into(), total);
        Ok(StepLog {
            step: self.optim.step,
            stage: Stage::Student,
            losses,
            lr: stats.lr,
            seed: self.seed,
        })
    }

    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.optim.step < self.cfg.steps {
            let log = self.step()?;
            on_step(&log);
        }
        Ok(())
    }
}
