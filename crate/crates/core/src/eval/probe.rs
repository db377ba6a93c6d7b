use std::collections::HashSet;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sentence_embedding;
use crate::corpus::{SyntheticWorld, TokenSequence};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::ops::softmax_rows;
use crate::rng::{self, stream};
use crate::scalar::Scalar;

/// Full-batch gradient-descent steps for the probe classifier.
pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

/// Sentences labelled with the dominant grounding cluster of their words.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub n_classes: usize,
    pub train: Vec<(TokenSequence, usize)>,
    pub test: Vec<(TokenSequence, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    pub seed: u64,
}

/// Draws a class-balanced task: `n_train / k` and `n_test / k` sentences per
/// class, with no word sequence shared between (or repeated within) the splits.
/// Sentences without a unique dominant cluster are skipped.
pub fn make_probe_task(world: &SyntheticWorld, n_train: usize, n_test: usize, seed: u64) -> Result<ProbeTask> {
    let k = world.grounding.n_clusters;
    if k < 2 {
        return Err(Error::InvalidArgument("a probe task needs at least two classes".into()));
    }
    let (per_train, per_test) = (n_train / k, n_test / k);
    if per_train == 0 || per_test == 0 {
        return Err(Error::InvalidArgument("probe splits too small for the class count".into()));
    }
    let mut r = rng::derive(seed, &[stream::PROBE]);
    let mut seen = HashSet::new();
    let mut counts = vec![(0usize, 0usize); k];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let budget = 1000 * (n_train + n_test);
    for _ in 0..budget {
        if counts.iter().all(|&(a, b)| a == per_train && b == per_test) {
            break;
        }
        let words = world.sample_words(&mut r);
        let Some(label) = world.dominant_cluster(&words) else { continue };
        if !seen.insert(words.clone()) {
            continue;
        }
        let c = &mut counts[label];
        if c.0 < per_train {
            c.0 += 1;
            train.push((world.sequence(&words), label));
        } else if c.1 < per_test {
            c.1 += 1;
            test.push((world.sequence(&words), label));
        }
    }
    if counts.iter().any(|&(a, b)| a < per_train || b < per_test) {
        return Err(Error::InvalidArgument("could not fill a balanced probe task".into()));
    }
    Ok(ProbeTask {
        name: format!("dominant-cluster-{k}way"),
        n_classes: k,
        train,
        test,
    })
}

/// Centers by the training mean and divides by the training RMS row norm.
/// Both steps commute with an orthogonal rotation of the features.
fn standardize(train: &Array2<f64>, test: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let ct = train - &mean;
    let rms = (ct.iter().map(|v| v * v).sum::<f64>() / ct.nrows() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    (ct * scale, (test - &mean) * scale)
}

/// Test accuracy of a softmax-regression probe trained from zero weights by
/// full-batch gradient descent.
pub fn probe_accuracy(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || train_x.ncols() != test_x.ncols() {
        return Err(Error::ShapeMismatch {
            expected: "one label per row and equal widths".into(),
            got: format!("{:?}/{} and {:?}/{}", train_x.dim(), train_y.len(), test_x.dim(), test_y.len()),
        });
    }
    if test_y.is_empty() {
        return Err(Error::Empty("probe test split"));
    }
    let distinct: HashSet<_> = train_y.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument("probe training labels contain a single class".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= n_classes) {
        return Err(Error::IndexOutOfRange { index: bad, len: n_classes });
    }
    let (xtr, xte) = standardize(train_x, test_x);
    let n = xtr.nrows() as f64;
    let mut onehot = Array2::<f64>::zeros((xtr.nrows(), n_classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((xtr.ncols(), n_classes));
    let mut b = Array1::<f64>::zeros(n_classes);
    for _ in 0..PROBE_STEPS {
        let logits = xtr.dot(&w) + &b;
        let g = (softmax_rows(logits.view(), 1.0) - &onehot) / n;
        w.scaled_add(-PROBE_LR, &xtr.t().dot(&g));
        b.scaled_add(-PROBE_LR, &g.sum_axis(Axis(0)));
    }
    let scores = xte.dot(&w) + &b;
    let correct = scores
        .rows()
        .into_iter()
        .zip(test_y)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

fn embed_all<T: Scalar>(model: &EncoderModel<T>, rows: &[(TokenSequence, usize)]) -> Result<Array2<f64>> {
    let embs: Vec<Array1<T>> = rows.par_iter().map(|(s, _)| sentence_embedding(model, s)).collect::<Result<_>>()?;
    let mut x = Array2::zeros((embs.len(), model.d_hidden()));
    for (mut dst, e) in x.rows_mut().into_iter().zip(&embs) {
        dst.assign(&e.mapv(|v| v.to_f64_lossy()));
    }
    Ok(x)
}

/// Frozen-encoder probe: sentence embeddings feed the linear classifier.
pub fn probe_eval<T: Scalar>(model: &EncoderModel<T>, task: &ProbeTask, seed: u64) -> Result<ProbeReport> {
    let xtr = embed_all(model, &task.train)?;
    let xte = embed_all(model, &task.test)?;
    let ytr: Vec<usize> = task.train.iter().map(|(_, y)| *y).collect();
    let yte: Vec<usize> = task.test.iter().map(|(_, y)| *y).collect();
    Ok(ProbeReport {
        task: task.name.clone(),
        accuracy: probe_accuracy(&xtr, &ytr, &xte, &yte, task.n_classes)?,
        seed,
    })
}
