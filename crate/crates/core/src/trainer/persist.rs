//! Teacher and student checkpoints on top of the VLKC container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Stage, StudentModel, TeacherModel};
use crate::checkpoint::{load_container, save_container, Container};
use crate::corpus::Vocabulary;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::objectives::kd::{CrdState, VokenBank};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Parameters;
use crate::rng;

/// Everything besides tensors, stored as the `__config__` JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub text: EncoderConfig,
    pub video: Option<EncoderConfig>,
    /// Present when optimizer moments are stored.
    pub optim: Option<OptimMeta>,
    pub crd: Option<CrdMeta>,
    pub voken_ids: Option<Vec<String>>,
    /// Parameter hash of the teacher a student was distilled from.
    pub teacher_hash: Option<String>,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimMeta {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrdMeta {
    pub student_dim: usize,
    pub teacher_dim: usize,
    pub proj_dim: usize,
    pub dataset_size: usize,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCheckpoint {
    pub meta: CheckpointMeta,
    pub model: TeacherModel<f32>,
    pub optim: Option<AdamW<TeacherModel<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentCheckpoint {
    pub meta: CheckpointMeta,
    pub model: StudentModel<f32>,
    pub optim: Option<AdamW<StudentModel<f32>>>,
    pub bank: Option<VokenBank<f32>>,
}

const BANK_TENSOR: &str = "voken_bank";
const BUFFER_TENSOR: &str = "crd.buffer";

fn put_optim<P: Parameters<f32>>(c: &mut Container, meta: &mut CheckpointMeta, optim: &Option<AdamW<P>>) {
    meta.optim = optim.as_ref().map(|o| OptimMeta {
        config: o.config.clone(),
        step: o.step,
    });
    if let Some(o) = optim {
        c.insert_params("optim.m", &o.m);
        c.insert_params("optim.v", &o.v);
    }
}

fn get_optim<P: Parameters<f32> + Clone>(c: &Container, meta: &CheckpointMeta, model: &P) -> Result<Option<AdamW<P>>> {
    meta.optim
        .as_ref()
        .map(|om| {
            let mut o = AdamW::new(model, om.config.clone());
            o.step = om.step;
            c.fill_params("optim.m", &mut o.m)?;
            c.fill_params("optim.v", &mut o.v)?;
            Ok(o)
        })
        .transpose()
}

fn fresh_encoder(cfg: &EncoderConfig) -> Result<EncoderModel<f32>> {
    // Values are overwritten from the file; the generator only fixes shapes.
    EncoderModel::init(cfg.clone(), &mut rng::derive(0, &[]))
}

/// Reads only the metadata of a checkpoint of either stage.
pub fn load_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    load_container(path)?.config()
}

pub fn save_teacher(path: impl AsRef<Path>, ck: &TeacherCheckpoint) -> Result<()> {
    let mut meta = ck.meta.clone();
    meta.stage = Stage::Teacher;
    meta.text = ck.model.text.config.clone();
    meta.video = Some(ck.model.video.config.clone());
    let mut c = Container::default();
    c.insert_params("", &ck.model);
    put_optim(&mut c, &mut meta, &ck.optim);
    c.set_config(&meta)?;
    save_container(path, &c)
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<TeacherCheckpoint> {
    let c = load_container(path)?;
    let meta: CheckpointMeta = c.config()?;
    if meta.stage != Stage::Teacher {
        return Err(Error::Config("checkpoint is not a teacher".into()));
    }
    let video_cfg = meta.video.as_ref().ok_or_else(|| Error::Config("teacher checkpoint lacks a video encoder".into()))?;
    let mut model = TeacherModel {
        text: fresh_encoder(&meta.text)?,
        video: fresh_encoder(video_cfg)?,
    };
    c.fill_params("", &mut model)?;
    let optim = get_optim(&c, &meta, &model)?;
    Ok(TeacherCheckpoint { meta, model, optim })
}

pub fn save_student(path: impl AsRef<Path>, ck: &StudentCheckpoint) -> Result<()> {
    let mut meta = ck.meta.clone();
    meta.stage = Stage::Student;
    meta.text = ck.model.text.config.clone();
    meta.video = None;
    meta.crd = ck.model.crd.as_ref().map(|s| CrdMeta {
        student_dim: s.proj.f1.d_in(),
        teacher_dim: s.proj.f2.d_in(),
        proj_dim: s.proj.f1.d_out(),
        dataset_size: s.dataset_size(),
        momentum: s.momentum,
    });
    meta.voken_ids = ck.bank.as_ref().map(|b| b.ids.clone());
    let mut c = Container::default();
    c.insert_params("", &ck.model);
    if let Some(s) = &ck.model.crd {
        c.insert_matrix(BUFFER_TENSOR, &s.buffer);
    }
    if let Some(b) = &ck.bank {
        c.insert_matrix(BANK_TENSOR, &b.vectors);
    }
    put_optim(&mut c, &mut meta, &ck.optim);
    c.set_config(&meta)?;
    save_container(path, &c)
}

pub fn load_student(path: impl AsRef<Path>) -> Result<StudentCheckpoint> {
    let c = load_container(path)?;
    let meta: CheckpointMeta = c.config()?;
    if meta.stage != Stage::Student {
        return Err(Error::Config("checkpoint is not a student".into()));
    }
    let crd = meta
        .crd
        .as_ref()
        .map(|m| -> Result<CrdState<f32>> {
            let mut s = CrdState::init(
                &mut rng::derive(0, &[]),
                m.student_dim,
                m.teacher_dim,
                m.proj_dim,
                m.dataset_size,
                m.momentum,
            );
            s.buffer = c.matrix(BUFFER_TENSOR)?;
            Ok(s)
        })
        .transpose()?;
    let mut model = StudentModel {
        text: fresh_encoder(&meta.text)?,
        crd,
    };
    c.fill_params("", &mut model)?;
    let bank = meta
        .voken_ids
        .as_ref()
        .map(|ids| VokenBank::new(c.matrix(BANK_TENSOR)?, ids.clone()))
        .transpose()?;
    let optim = get_optim(&c, &meta, &model)?;
    Ok(StudentCheckpoint {
        meta,
        model,
        optim,
        bank,
    })
}
