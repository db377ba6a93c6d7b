use vlkd::corpus::{gen_synthetic_pairs, SynthConfig, SyntheticDataset, TokenSequence};
use vlkd::objectives::kd::{KdConfig, KdObjective};
use vlkd::rng;
use vlkd::trainer::{
    ModelSpec, StepLog, StudentRunConfig, StudentTrainer, TeacherModel, TeacherRunConfig, TeacherTrainer,
};
use vlkd::Parameters;

fn tiny_model() -> ModelSpec {
    ModelSpec {
        n_layers: Some(1),
        d_hidden: Some(16),
        n_heads: Some(2),
        d_ff: Some(32),
        ..Default::default()
    }
}

fn dataset() -> SyntheticDataset {
    let cfg = SynthConfig {
        num_pairs: 16,
        vocab_words: 10,
        n_clusters: 2,
        feature_dim: 8,
        ..Default::default()
    };
    gen_synthetic_pairs(&cfg, &mut rng::derive(5, &[rng::stream::SYNTH])).unwrap()
}

fn teacher_cfg(steps: u64) -> TeacherRunConfig {
    TeacherRunConfig {
        model: tiny_model(),
        batch_size: 4,
        steps,
        ..Default::default()
    }
}

fn student_cfg(steps: u64, objectives: &[KdObjective]) -> StudentRunConfig {
    StudentRunConfig {
        model: tiny_model(),
        batch_size: 4,
        steps,
        kd: KdConfig::with_objectives(objectives),
        ..Default::default()
    }
}

fn run_teacher(data: &SyntheticDataset, steps: u64) -> (Vec<StepLog>, TeacherModel<f32>) {
    let mut t = TeacherTrainer::new(teacher_cfg(steps), 1, &data.samples, data.world.vocab.len()).unwrap();
    let mut logs = Vec::new();
    t.run(|l| logs.push(l.clone())).unwrap();
    (logs, t.model)
}

#[test]
fn teacher_runs_are_reproducible_and_resumable() {
    let data = dataset();
    let (logs_a, model_a) = run_teacher(&data, 8);
    let (logs_b, model_b) = run_teacher(&data, 8);
    assert_eq!(logs_a, logs_b);
    assert_eq!(model_a.param_hash(), model_b.param_hash());

    let vocab = data.world.vocab.len();
    let mut half = TeacherTrainer::new(teacher_cfg(4), 1, &data.samples, vocab).unwrap();
    half.run(|_| {}).unwrap();
    let mut rest =
        TeacherTrainer::resume(teacher_cfg(8), 1, &data.samples, half.model, Some(half.optim)).unwrap();
    let mut tail = Vec::new();
    rest.run(|l| tail.push(l.clone())).unwrap();
    assert_eq!(tail, logs_a[4..]);
    assert_eq!(rest.model, model_a);
}

#[test]
fn distillation_leaves_the_teacher_untouched_and_resumes_exactly() {
    let data = dataset();
    let (_, teacher) = run_teacher(&data, 3);
    let hash = teacher.param_hash();
    let texts: Vec<TokenSequence> = data.samples.iter().map(|s| s.text.clone()).collect();
    let vocab = data.world.vocab.len();
    let objectives = [KdObjective::SoftLabel, KdObjective::Nst, KdObjective::Crd];

    let mut full = StudentTrainer::new(student_cfg(6, &objectives), 2, Some(&teacher), None, &texts, vocab).unwrap();
    let mut logs = Vec::new();
    full.run(|l| logs.push(l.clone())).unwrap();
    assert_eq!(teacher.param_hash(), hash);
    assert!(logs.iter().all(|l| l.losses.contains_key("crd") && l.losses.contains_key("nst")));

    let mut half = StudentTrainer::new(student_cfg(3, &objectives), 2, Some(&teacher), None, &texts, vocab).unwrap();
    half.run(|_| {}).unwrap();
    let mut rest = StudentTrainer::resume(
        student_cfg(6, &objectives),
        2,
        Some(&teacher),
        None,
        &texts,
        half.model,
        Some(half.optim),
    )
    .unwrap();
    let mut tail = Vec::new();
    rest.run(|l| tail.push(l.clone())).unwrap();
    assert_eq!(tail, logs[3..]);
    assert_eq!(rest.model, full.model);
}
