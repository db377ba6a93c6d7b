//! Voken classification: each content token is labelled with the bank video
//! whose pooled representation has the highest cosine with the teacher state.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;

use crate::corpus::{load_matrix, save_matrix};
use crate::error::{Error, Result};
use crate::objectives::{cross_entropy, cross_entropy_with_grad, Reduction};
use crate::ops::norm;
use crate::scalar::Scalar;

/// `K x d` pooled video representations plus one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VokenBank<T> {
    pub vectors: Array2<T>,
    pub ids: Vec<String>,
}

/// Per content token, the assigned voken id in `[0, K)`.
pub type VokenAssignment = Vec<usize>;

impl<T: Scalar> VokenBank<T> {
    pub fn new(vectors: Array2<T>, ids: Vec<String>) -> Result<Self> {
        let bank = Self { vectors, ids };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Config(format!(
                "voken bank needs at least 2 rows, has {}",
                self.len()
            )));
        }
        if self.ids.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} voken ids", self.len()),
                got: self.ids.len().to_string(),
            });
        }
        for (k, row) in self.vectors.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) || norm(row) == T::zero() {
                return Err(Error::DegenerateEmbedding);
            }
            let _ = k;
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate voken id {dup:?}")));
        }
        Ok(())
    }

    fn ids_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".ids");
        PathBuf::from(p)
    }

    /// Writes the matrix at `path` and the ids, one per line, at `path.ids`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_matrix(path, &self.vectors)?;
        let mut text = self.ids.join("\n");
        text.push('\n');
        fs::write(Self::ids_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let vectors = load_matrix(path)?.mapv(|v| T::of(v as f64));
        let ids = fs::read_to_string(Self::ids_path(path))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Self::new(vectors, ids)
    }

    pub fn cast<U: Scalar>(&self) -> VokenBank<U> {
        VokenBank {
            vectors: self.vectors.mapv(|v| U::of(v.to_f64_lossy())),
            ids: self.ids.clone(),
        }
    }
}

/// Argmax-cosine bank row for every row of `states`; ties go to the lowest id.
pub fn assign_vokens<T: Scalar>(states: ArrayView2<T>, bank: &VokenBank<T>) -> Result<VokenAssignment> {
    if states.nrows() == 0 {
        return Err(Error::Empty("content positions"));
    }
    if states.ncols() != bank.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("hidden dim {}", bank.dim()),
            got: states.ncols().to_string(),
        });
    }
    let bank_norms: Vec<T> = bank.vectors.rows().into_iter().map(norm).collect();
    let sims = states.dot(&bank.vectors.t());
    states
        .rows()
        .into_iter()
        .zip(sims.rows())
        .map(|(h, row)| {
            if norm(h) == T::zero() {
                return Err(Error::DegenerateEmbedding);
            }
            // The token norm is a positive constant per row, so it cannot change
            // the argmax and is left out.
            let mut best = 0;
            let mut best_val = T::neg_infinity();
            for (k, (&s, &n)) in row.iter().zip(&bank_norms).enumerate() {
                let c = s / n;
                if c > best_val {
                    best = k;
                    best_val = c;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Picks `k` bank members from a labelled pool: the first sample of each
/// cluster (in cluster order), then the rest uniformly without replacement.
pub fn select_bank_members<R: Rng + ?Sized>(clusters: &[usize], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > clusters.len() {
        return Err(Error::InvalidArgument(format!(
            "voken bank of size {k} requested from a pool of {}",
            clusters.len()
        )));
    }
    let n_clusters = clusters.iter().copied().max().map_or(0, |c| c + 1);
    let mut chosen: Vec<usize> = (0..n_clusters)
        .filter_map(|c| clusters.iter().position(|&x| x == c))
        .take(k)
        .collect();
    let taken: HashSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..clusters.len()).filter(|i| !taken.contains(i)).collect();
    let extra = k - chosen.len();
    let mut picked: Vec<usize> = sample(rng, rest.len(), extra).into_iter().map(|i| rest[i]).collect();
    picked.sort_unstable();
    chosen.extend(picked);
    Ok(chosen)
}

/// Mean cross-entropy of the assigned voken ids under the student logits.
pub fn voken_loss<T: Scalar>(logits: ArrayView2<T>, assignment: &[usize], reduction: Reduction) -> Result<T> {
    cross_entropy(logits, assignment, reduction)
}

pub fn voken_loss_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    assignment: &[usize],
    reduction: Reduction,
) -> Result<(T, Array2<T>)> {
    cross_entropy_with_grad(logits, assignment, reduction)
}
