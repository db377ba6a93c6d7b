use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vlkd::checkpoint::write_atomic;
use vlkd::eval::{agreement_metrics, make_probe_task, probe_eval, recall_at_k};
use vlkd::gradcheck::loss_gradcheck_suite;
use vlkd::objectives::kd::{KdObjective, VokenBank};
use vlkd::pipeline::{
    generate_data, load_data_dir, prepare_output_dir, write_data_dir, DataDir, RunConfig,
    RunManifest,
};
use vlkd::trainer::{
    build_voken_bank, load_checkpoint_meta, load_student, load_teacher, save_student,
    save_teacher, CheckpointMeta, Stage, StepLog, StudentCheckpoint, StudentTrainer,
    TeacherCheckpoint, TeacherModel, TeacherTrainer,
};
use vlkd::{Encoder, Error, Parameters};

const CONFIG_FILE: &str = "config.json";
const STEP_LOG_FILE: &str = "steps.jsonl";
const TEACHER_FILE: &str = "teacher.vlkc";
const STUDENT_FILE: &str = "student.vlkc";
const LAST_GOOD_SUFFIX: &str = ".last_good";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vlkd", version, about = "Video-grounded teacher pretraining and text-only student distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration. Flags override values from the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Optimizer steps for the stage being run (ignored by gen-synth and eval).
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Retrieval,
    Probe,
    Agreement,
    Gradcheck,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired video-text dataset directory.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the teacher with the contrastive and MLM losses.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Distill a frozen teacher into a text-only student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint or teacher run directory.
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated KD objectives, or `none`. Overrides the config.
        #[arg(long)]
        kd: Option<String>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint (or run directory) to evaluate; a teacher is accepted too.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Retrieval list length.
        #[arg(long)]
        k: Option<usize>,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A checkpoint file, or the first of `names` inside a run directory.
fn checkpoint_path(p: &Path, names: &[&str]) -> Result<PathBuf> {
    if !p.is_dir() {
        return Ok(p.to_path_buf());
    }
    names
        .iter()
        .map(|n| p.join(n))
        .find(|c| c.is_file())
        .ok_or_else(|| anyhow!("no checkpoint ({}) in {}", names.join(" or "), p.display()))
}

fn parse_objectives(spec: &str) -> Result<Vec<KdObjective>> {
    if spec.trim() == "none" {
        return Ok(Vec::new());
    }
    spec.split(',')
        .map(|s| KdObjective::parse(s.trim()).map_err(Into::into))
        .collect()
}

fn last_good(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{LAST_GOOD_SUFFIX}.vlkc"))
}

fn base_meta(stage: Stage, cfg: &RunConfig, data: &DataDir, text: &Encoder) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        stage,
        seed: cfg.seed,
        vocab: data.vocab().clone(),
        text: text.config.clone(),
        video: None,
        optim: None,
        crd: None,
        voken_ids: None,
        teacher_hash: None,
        run: serde_json::to_value(cfg)?,
    })
}

/// Appends step logs to a JSONL file, remembering the first write error.
struct StepLogWriter {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    every: u64,
}

impl StepLogWriter {
    fn create(path: &Path, total_steps: u64) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            error: None,
            every: (total_steps / 10).max(1),
        })
    }

    fn record(&mut self, log: &StepLog) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{}", log.to_json_line()) {
                self.error = Some(e);
            }
        }
        if log.step % self.every == 0 {
            let total = log.losses.get("total").copied().unwrap_or(f64::NAN);
            eprintln!("step {:>6}  total {total:.4}  lr {:.2e}", log.step, log.lr);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e.into());
        }
        self.out.flush()?;
        Ok(())
    }
}

fn gen_synth(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    prepare_output_dir(&common.out, common.force)?;
    let manifest = RunManifest::begin("gen-synth", cfg.seed, &cfg)?;
    let data = generate_data(&cfg.synth, cfg.eval.heldout_sentences, cfg.seed)?;
    let mut files = write_data_dir(&common.out, &data)?;
    write_atomic(common.out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;
    files.push(CONFIG_FILE.into());
    manifest.finish(&common.out, &files)?;
    println!("wrote {} pairs to {}", data.dataset.len(), common.out.display());
    Ok(())
}

fn train_teacher(common: &Common, data_dir: &Path) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = common.steps {
        cfg.teacher.steps = s;
    }
    let data = load_data_dir(data_dir)?;
    prepare_output_dir(&common.out, common.force)?;
    let manifest = RunManifest::begin("train-teacher", cfg.seed, &cfg)?;
    write_atomic(common.out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;

    let mut trainer = TeacherTrainer::new(cfg.teacher.clone(), cfg.seed, &data.samples, data.vocab().len())?;
    let mut log = StepLogWriter::create(&common.out.join(STEP_LOG_FILE), cfg.teacher.steps)?;
    let outcome = trainer.run(|l| log.record(l));
    log.finish()?;

    let ckpt_path = common.out.join(TEACHER_FILE);
    let checkpoint = |path: &Path| -> Result<()> {
        let ck = TeacherCheckpoint {
            meta: base_meta(Stage::Teacher, &cfg, &data, &trainer.model.text)?,
            model: trainer.model.clone(),
            optim: Some(trainer.optim.clone()),
        };
        Ok(save_teacher(path, &ck)?)
    };
    if let Err(e) = outcome {
        if matches!(e, Error::Divergence { .. }) {
            let path = last_good(&ckpt_path);
            checkpoint(&path)?;
            return Err(anyhow!(e).context(format!("last good checkpoint saved to {}", path.display())));
        }
        return Err(e.into());
    }
    checkpoint(&ckpt_path)?;
    manifest.finish(&common.out, &[CONFIG_FILE.into(), STEP_LOG_FILE.into(), TEACHER_FILE.into()])?;
    println!("teacher trained for {} steps: {}", trainer.step_count(), ckpt_path.display());
    Ok(())
}

fn distill(common: &Common, data_dir: &Path, teacher_path: &Path, kd: Option<&str>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = common.steps {
        cfg.student.steps = s;
    }
    if let Some(spec) = kd {
        cfg.student.kd.objectives = parse_objectives(spec)?;
    }
    let data = load_data_dir(data_dir)?;
    let teacher_file = checkpoint_path(teacher_path, &[TEACHER_FILE])?;
    let teacher = load_teacher(&teacher_file).with_context(|| format!("loading teacher {}", teacher_file.display()))?;
    if &teacher.meta.vocab != data.vocab() {
        bail!("teacher vocabulary does not match the dataset vocabulary");
    }
    let texts = data.texts();
    cfg.student.validate(texts.len())?;
    // The bank is built up front so a voken configuration fails before training.
    let bank: Option<VokenBank<f32>> = if cfg.student.kd.enabled(KdObjective::Voken) {
        Some(build_voken_bank(
            &teacher.model,
            &data.samples,
            &data.sample_clusters(),
            cfg.student.kd.voken_bank_size,
            cfg.seed,
        )?)
    } else {
        None
    };

    prepare_output_dir(&common.out, common.force)?;
    let manifest = RunManifest::begin("distill", cfg.seed, &cfg)?;
    write_atomic(common.out.join(CONFIG_FILE), cfg.to_json().as_bytes())?;

    let frozen: &TeacherModel<f32> = &teacher.model;
    let teacher_hash = frozen.param_hash();
    let mut trainer = StudentTrainer::new(
        cfg.student.clone(),
        cfg.seed,
        Some(frozen),
        bank.clone(),
        &texts,
        data.vocab().len(),
    )?;
    let mut log = StepLogWriter::create(&common.out.join(STEP_LOG_FILE), cfg.student.steps)?;
    let outcome = trainer.run(|l| log.record(l));
    log.finish()?;
    if frozen.param_hash() != teacher_hash {
        bail!("teacher parameters changed during distillation");
    }

    let ckpt_path = common.out.join(STUDENT_FILE);
    let checkpoint = |path: &Path| -> Result<()> {
        let mut meta = base_meta(Stage::Student, &cfg, &data, &trainer.model.text)?;
        meta.teacher_hash = Some(teacher_hash.clone());
        let ck = StudentCheckpoint {
            meta,
            model: trainer.model.clone(),
            optim: Some(trainer.optim.clone()),
            bank: bank.clone(),
        };
        Ok(save_student(path, &ck)?)
    };
    if let Err(e) = outcome {
        if matches!(e, Error::Divergence { .. }) {
            let path = last_good(&ckpt_path);
            checkpoint(&path)?;
            return Err(anyhow!(e).context(format!("last good checkpoint saved to {}", path.display())));
        }
        return Err(e.into());
    }
    checkpoint(&ckpt_path)?;
    manifest.finish(&common.out, &[CONFIG_FILE.into(), STEP_LOG_FILE.into(), STUDENT_FILE.into()])?;
    println!("student distilled for {} steps: {}", trainer.step_count(), ckpt_path.display());
    Ok(())
}

/// The text encoder of either stage, plus the frame encoder when the file is a teacher.
struct AnyModel {
    text: Encoder,
    video: Option<Encoder>,
    is_student: bool,
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let file = checkpoint_path(path, &[STUDENT_FILE, TEACHER_FILE])?;
    let meta = load_checkpoint_meta(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(match meta.stage {
        Stage::Teacher => {
            let t = load_teacher(&file)?;
            AnyModel {
                text: t.model.text,
                video: Some(t.model.video),
                is_student: false,
            }
        }
        Stage::Student => AnyModel {
            text: load_student(&file)?.model.text,
            video: None,
            is_student: true,
        },
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?)
}

fn need<'a>(p: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    p.ok_or_else(|| anyhow!("this --mode requires --{flag}"))
}

struct EvalArgs<'a> {
    data: Option<&'a Path>,
    student: Option<&'a Path>,
    teacher: Option<&'a Path>,
    mode: Mode,
    k: Option<usize>,
}

fn eval(common: &Common, args: EvalArgs) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(k) = args.k {
        cfg.eval.k = k;
    }
    prepare_output_dir(&common.out, common.force)?;
    let manifest = RunManifest::begin("eval", cfg.seed, &cfg)?;
    let report: &str = match args.mode {
        Mode::Gradcheck => {
            let reports = loss_gradcheck_suite(cfg.seed)?;
            for r in &reports {
                println!("{:<12} max_rel_err {:.3e} over {} instances", r.loss, r.max_rel_err, r.instances);
            }
            write_json(&common.out.join("gradcheck.json"), &reports)?;
            manifest.finish(&common.out, &["gradcheck.json".into()])?;
            if let Some(bad) = reports.iter().find(|r| !(r.max_rel_err < GRADCHECK_TOLERANCE)) {
                bail!("{} gradient check failed: {:.3e}", bad.loss, bad.max_rel_err);
            }
            return Ok(());
        }
        Mode::Retrieval => {
            let data = load_data_dir(need(args.data, "data")?)?;
            let model = load_any(need(args.student, "student")?)?;
            let video = match (model.video, args.teacher) {
                (_, Some(t)) => load_any(t)?.video.ok_or_else(|| anyhow!("--teacher is not a teacher checkpoint"))?,
                (Some(v), None) => v,
                (None, None) => bail!("retrieval needs a frame encoder: pass --teacher"),
            };
            let (recall, results) = recall_at_k(&model.text, &video, &data.samples, cfg.eval.k)?;
            let r1 = results.iter().filter(|r| r.gt_rank == Some(1)).count() as f64 / results.len() as f64;
            let mut out = String::new();
            for r in &results {
                out.push_str(&serde_json::to_string(r)?);
                out.push('\n');
            }
            write_atomic(common.out.join("retrieval.jsonl"), out.as_bytes())?;
            println!("recall@1 {r1:.4}  recall@{} {recall:.4}  queries {}", cfg.eval.k, results.len());
            "retrieval.jsonl"
        }
        Mode::Probe => {
            let data = load_data_dir(need(args.data, "data")?)?;
            let model = load_any(need(args.student, "student")?)?;
            let task = make_probe_task(&data.world, cfg.eval.probe_train, cfg.eval.probe_test, cfg.seed)?;
            let report = probe_eval(&model.text, &task, cfg.seed)?;
            write_json(&common.out.join("probe.json"), &report)?;
            println!("{} accuracy {:.4}", report.task, report.accuracy);
            "probe.json"
        }
        Mode::Agreement => {
            let data = load_data_dir(need(args.data, "data")?)?;
            let student = load_any(need(args.student, "student")?)?;
            if !student.is_student {
                bail!("agreement compares a student checkpoint against its teacher");
            }
            let teacher = load_any(need(args.teacher, "teacher")?)?;
            let a = agreement_metrics(&student.text, &teacher.text, &data.heldout, true)?;
            write_json(&common.out.join("agreement.json"), &a)?;
            println!("mean token L2 {:.4}  mean token cosine {:.4}  positions {}", a.mean_l2, a.mean_cosine, a.positions);
            "agreement.json"
        }
    };
    manifest.finish(&common.out, &[report.into()])?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VLKD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("VLKD_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("VLKD_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    match &cli.command {
        Command::GenSynth { common } => gen_synth(common),
        Command::TrainTeacher { common, data } => train_teacher(common, data),
        Command::Distill {
            common,
            data,
            teacher,
            kd,
        } => distill(common, data, teacher, kd.as_deref()),
        Command::Eval {
            common,
            data,
            student,
            teacher,
            mode,
            k,
        } => eval(
            common,
            EvalArgs {
                data: data.as_deref(),
                student: student.as_deref(),
                teacher: teacher.as_deref(),
                mode: *mode,
                k: *k,
            },
        ),
    }
}
