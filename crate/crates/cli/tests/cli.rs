use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vlkd::pipeline::{load_data_dir, RunManifest};
use vlkd::trainer::{load_student, load_teacher, TeacherModel};
use vlkd::Parameters;

const TINY: &str = r#"{
  "seed": 4,
  "synth": {"num_pairs": 24, "vocab_words": 12, "n_clusters": 2, "feature_dim": 8},
  "teacher": {"batch_size": 4, "model": {"n_layers": 1, "d_hidden": 16, "n_heads": 2, "d_ff": 32}},
  "student": {"batch_size": 4, "model": {"n_layers": 1, "d_hidden": 16, "n_heads": 2, "d_ff": 32},
              "kd": {"voken_bank_size": 6}},
  "eval": {"probe_train": 16, "probe_test": 16, "heldout_sentences": 6}
}"#;

fn vlkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlkd"))
        .args(args)
        .env("VLKD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vlkd(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = vlkd(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn gen(&self, out: &str) {
        ok(&["gen-synth", "--config", &self.s("tiny.json"), "--out", &self.s(out)]);
    }

    fn teacher(&self, data: &str, out: &str, steps: &str) {
        ok(&[
            "train-teacher", "--config", &self.s("tiny.json"), "--data", &self.s(data),
            "--out", &self.s(out), "--steps", steps,
        ]);
    }
}

fn line_count(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_synth_is_deterministic_and_guards_its_output() {
    let w = Workspace::new();
    w.gen("a");
    w.gen("b");
    let a = RunManifest::load(w.path("a")).unwrap();
    let b = RunManifest::load(w.path("b")).unwrap();
    assert_eq!(a.files, b.files);
    assert_eq!(a.files.keys().filter(|f| f.starts_with("features/")).count(), 24);
    assert!(a.verify(w.path("a")).unwrap().is_empty());
    assert_eq!(load_data_dir(w.path("a")).unwrap().samples.len(), 24);

    let err = fails(&["gen-synth", "--config", &w.s("tiny.json"), "--out", &w.s("a")]);
    assert!(err.contains("--force"), "{err}");
    ok(&["gen-synth", "--config", &w.s("tiny.json"), "--out", &w.s("a"), "--force", "--seed", "5"]);
    let c = RunManifest::load(w.path("a")).unwrap();
    assert_eq!(c.seed, 5);
    assert_ne!(c.files["corpus.txt"], a.files["corpus.txt"]);
}

#[test]
fn default_config_generates_256_pairs() {
    let w = Workspace::new();
    let out = ok(&["gen-synth", "--out", &w.s("d")]);
    assert!(out.contains("256 pairs"), "{out}");
    assert_eq!(line_count(&w.path("d/pairs.jsonl")), 256);
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let w = Workspace::new();
    std::fs::write(w.path("bad.json"), r#"{"teacher": {"lr": 0.1}}"#).unwrap();
    let err = fails(&["gen-synth", "--config", &w.s("bad.json"), "--out", &w.s("x")]);
    assert!(err.contains("`lr`"), "{err}");
}

#[test]
fn missing_pairing_index_is_an_error() {
    let w = Workspace::new();
    std::fs::create_dir(w.path("empty")).unwrap();
    let err = fails(&["train-teacher", "--data", &w.s("empty"), "--out", &w.s("t")]);
    assert!(err.contains("missing pairing index"), "{err}");
}

#[test]
fn zero_teacher_steps_saves_the_initialization() {
    let w = Workspace::new();
    w.gen("data");
    w.teacher("data", "t0", "0");
    assert_eq!(line_count(&w.path("t0/steps.jsonl")), 0);
    let ck = load_teacher(w.path("t0/teacher.vlkc")).unwrap();
    let cfg = vlkd::pipeline::RunConfig::from_json(TINY).unwrap();
    let init = TeacherModel::<f32>::init(&cfg.teacher.model, ck.meta.vocab.len(), 8, 4).unwrap();
    assert_eq!(ck.model.param_hash(), init.param_hash());
}

#[test]
fn pipeline_end_to_end() {
    let w = Workspace::new();
    w.gen("data");
    w.teacher("data", "teacher", "3");
    assert_eq!(line_count(&w.path("teacher/steps.jsonl")), 3);
    let m = RunManifest::load(w.path("teacher")).unwrap();
    assert_eq!(m.command, "train-teacher");
    assert!(m.verify(w.path("teacher")).unwrap().is_empty());
    let teacher_hash = load_teacher(w.path("teacher/teacher.vlkc")).unwrap().model.param_hash();

    ok(&[
        "distill", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--teacher", &w.s("teacher"),
        "--out", &w.s("student"), "--steps", "2",
    ]);
    assert_eq!(line_count(&w.path("student/steps.jsonl")), 2);
    let student = load_student(w.path("student/student.vlkc")).unwrap();
    assert_eq!(student.meta.teacher_hash.as_deref(), Some(teacher_hash.as_str()));
    assert!(student.model.crd.is_some());
    assert_eq!(
        load_teacher(w.path("teacher/teacher.vlkc")).unwrap().model.param_hash(),
        teacher_hash
    );

    ok(&[
        "eval", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--student", &w.s("teacher"),
        "--mode", "retrieval", "--k", "3", "--out", &w.s("eval_r"),
    ]);
    let report = std::fs::read_to_string(w.path("eval_r/retrieval.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 24);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["topk"].as_array().unwrap().len(), 3);
        assert!(v["gt_rank"].as_u64().unwrap() >= 1);
    }

    let out = ok(&[
        "eval", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--student", &w.s("student"),
        "--teacher", &w.s("teacher"), "--mode", "agreement", "--out", &w.s("eval_a"),
    ]);
    assert!(out.contains("mean token cosine"), "{out}");
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("eval_a/agreement.json")).unwrap()).unwrap();
    assert!(a["positions"].as_u64().unwrap() > 0);

    ok(&[
        "eval", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--student", &w.s("student"),
        "--mode", "probe", "--out", &w.s("eval_p"),
    ]);
    let p: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("eval_p/probe.json")).unwrap()).unwrap();
    let acc = p["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(p["seed"].as_u64(), Some(4));

    let err = fails(&[
        "eval", "--data", &w.s("data"), "--student", &w.s("student"), "--mode", "retrieval",
        "--out", &w.s("eval_x"),
    ]);
    assert!(err.contains("--teacher"), "{err}");
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let w = Workspace::new();
    w.gen("data");
    w.teacher("data", "t1", "2");
    w.teacher("data", "t2", "2");
    let a = RunManifest::load(w.path("t1")).unwrap();
    let b = RunManifest::load(w.path("t2")).unwrap();
    assert_eq!(a.files, b.files);
}

#[test]
fn voken_distillation_and_early_bank_errors() {
    let w = Workspace::new();
    w.gen("data");
    w.teacher("data", "teacher", "1");
    ok(&[
        "distill", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--teacher", &w.s("teacher"),
        "--out", &w.s("vok"), "--steps", "1", "--kd", "voken,soft_label",
    ]);
    let ck = load_student(w.path("vok/student.vlkc")).unwrap();
    assert_eq!(ck.bank.as_ref().map(|b| b.len()), Some(6));

    std::fs::write(
        w.path("big_bank.json"),
        TINY.replace(r#""voken_bank_size": 6"#, r#""voken_bank_size": 500"#),
    )
    .unwrap();
    fails(&[
        "distill", "--config", &w.s("big_bank.json"), "--data", &w.s("data"), "--teacher",
        &w.s("teacher"), "--out", &w.s("vok_bad"), "--kd", "voken",
    ]);
    assert!(!w.path("vok_bad/steps.jsonl").exists());
}

#[test]
fn distill_without_kd_runs_on_mlm_alone() {
    let w = Workspace::new();
    w.gen("data");
    w.teacher("data", "teacher", "1");
    ok(&[
        "distill", "--config", &w.s("tiny.json"), "--data", &w.s("data"), "--teacher", &w.s("teacher"),
        "--out", &w.s("plain"), "--steps", "2", "--kd", "none",
    ]);
    let log = std::fs::read_to_string(w.path("plain/steps.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let losses = v["losses"].as_object().unwrap();
        assert_eq!(losses["total"], losses["mlm"]);
    }
}

#[test]
fn gradcheck_mode_reports_every_loss() {
    let w = Workspace::new();
    let out = ok(&["eval", "--mode", "gradcheck", "--out", &w.s("g")]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7, "{out}");
    for name in ["contrastive", "mlm", "soft_label", "l2", "nst", "crd", "voken"] {
        assert!(lines.iter().any(|l| l.starts_with(name)), "{name} missing");
    }
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.path("g/gradcheck.json")).unwrap()).unwrap();
    for r in reports.as_array().unwrap() {
        assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
    }
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_vlkd"))
        .args(["eval", "--mode", "gradcheck", "--out", "/nonexistent/never"])
        .env("VLKD_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("VLKD_THREADS"));
}
