//! Desk-scale stand-in for an aligned video-text corpus.
//!
//! Every vocabulary word is tied to a latent visual prototype, and prototypes
//! are grouped into clusters ("visual tasks"). A sentence is a random word
//! sequence; its video is a run of frames, each a convex mixture of the
//! sentence's prototypes. Mixture weights are cyclic shifts of one random
//! weight vector and the frame count is a multiple of the sentence length, so
//! without noise the video mean is exactly the uniform prototype mixture.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{VideoFeatures, MAX_FRAMES};
use super::vocab::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Dataset cardinality M.
    pub num_pairs: usize,
    pub vocab_words: usize,
    pub n_clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frame feature dimension d_v.
    pub feature_dim: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Std of i.i.d. Gaussian noise added to every frame entry.
    pub noise: f64,
    /// Scale of the per-word offset from its cluster center.
    pub prototype_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_pairs: 256,
            vocab_words: 64,
            n_clusters: 4,
            min_len: 3,
            max_len: 7,
            feature_dim: 64,
            min_frames_per_token: 1,
            max_frames_per_token: 2,
            noise: 0.0,
            prototype_spread: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_pairs < 2 {
            return bad("num_pairs must be at least 2 (contrastive negatives need two samples)");
        }
        if self.vocab_words == 0 || self.n_clusters == 0 || self.n_clusters > self.vocab_words {
            return bad("need 1 <= n_clusters <= vocab_words");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("need 1 <= min_frames_per_token <= max_frames_per_token");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise >= 0.0) || !(self.prototype_spread >= 0.0) {
            return bad("noise and prototype_spread must be non-negative");
        }
        Ok(())
    }
}

/// The answer key: one prototype row and one cluster label per word.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingMap {
    pub prototypes: Array2<f32>,
    pub clusters: Vec<usize>,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub text: TokenSequence,
    pub video: VideoFeatures<f32>,
    pub sample_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub grounding: GroundingMap,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array1<f32> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

impl SyntheticWorld {
    pub fn new<R: Rng + ?Sized>(config: SynthConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        let centers: Vec<Array1<f32>> = (0..config.n_clusters)
            .map(|_| {
                let c = gaussian_vec(rng, d);
                let n = c.dot(&c).sqrt().max(f32::MIN_POSITIVE);
                c / n
            })
            .collect();
        let mut prototypes = Array2::zeros((config.vocab_words, d));
        let mut clusters = Vec::with_capacity(config.vocab_words);
        for w in 0..config.vocab_words {
            // Round-robin assignment keeps clusters equally sized.
            let c = w % config.n_clusters;
            let offset = gaussian_vec(rng, d) * (config.prototype_spread as f32 * inv_sqrt_d);
            prototypes.row_mut(w).assign(&(&centers[c] + &offset));
            clusters.push(c);
        }
        let vocab = Vocabulary::from_words((0..config.vocab_words).map(|w| format!("w{w}")));
        Ok(Self {
            grounding: GroundingMap {
                prototypes,
                clusters,
                n_clusters: config.n_clusters,
            },
            vocab,
            config,
        })
    }

    pub fn word_id(&self, word: usize) -> u32 {
        (word + Vocabulary::NUM_SPECIAL) as u32
    }

    pub fn sample_words<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.config.min_len..=self.config.max_len);
        (0..len)
            .map(|_| rng.random_range(0..self.config.vocab_words))
            .collect()
    }

    pub fn sentence_text(&self, words: &[usize]) -> String {
        words
            .iter()
            .map(|w| format!("w{w}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn sequence(&self, words: &[usize]) -> TokenSequence {
        let ids: Vec<u32> = words.iter().map(|&w| self.word_id(w)).collect();
        TokenSequence::from_content(&ids)
    }

    /// Mean of the sentence's word prototypes.
    pub fn uniform_mixture(&self, words: &[usize]) -> Array1<f32> {
        let mut acc = Array1::zeros(self.config.feature_dim);
        for &w in words {
            acc += &self.grounding.prototypes.row(w);
        }
        acc / words.len().max(1) as f32
    }

    /// Cluster holding a strict plurality of the sentence's words, if any.
    pub fn dominant_cluster(&self, words: &[usize]) -> Option<usize> {
        let mut counts = vec![0usize; self.grounding.n_clusters];
        for &w in words {
            counts[self.grounding.clusters[w]] += 1;
        }
        let max = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let (best, _) = winners.next()?;
        winners.next().is_none().then_some(best)
    }

    pub fn video_for<R: Rng + ?Sized>(
        &self,
        words: &[usize],
        rng: &mut R,
        source_id: String,
    ) -> VideoFeatures<f32> {
        let len = words.len();
        let per_token =
            rng.random_range(self.config.min_frames_per_token..=self.config.max_frames_per_token);
        let n_frames = (len * per_token).min(MAX_FRAMES);
        let raw: Vec<f32> = (0..len).map(|_| rng.random_range(0.1f32..1.0)).collect();
        let total: f32 = raw.iter().sum();
        let weights: Vec<f32> = raw.iter().map(|w| w / total).collect();
        let d = self.config.feature_dim;
        let mut frames = Array2::zeros((n_frames, d));
        for f in 0..n_frames {
            let mut row = frames.row_mut(f);
            for (k, &w) in words.iter().enumerate() {
                let weight = weights[(k + len - f % len) % len];
                row.scaled_add(weight, &self.grounding.prototypes.row(w));
            }
            if self.config.noise > 0.0 {
                row += &(gaussian_vec(rng, d) * self.config.noise as f32);
            }
        }
        VideoFeatures {
            frames,
            source_id,
        }
    }

    /// `count` freshly drawn aligned pairs indexed from zero.
    pub fn pairs<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<SyntheticDataset> {
        if count < 2 {
            return Err(Error::InvalidArgument(
                "a paired dataset needs at least 2 samples".into(),
            ));
        }
        let mut samples = Vec::with_capacity(count);
        let mut sentences = Vec::with_capacity(count);
        for i in 0..count {
            let words = self.sample_words(rng);
            let video = self.video_for(&words, rng, format!("v{i:05}"));
            samples.push(PairedSample {
                text: self.sequence(&words),
                video,
                sample_index: i,
            });
            sentences.push(words);
        }
        Ok(SyntheticDataset {
            world: self.clone(),
            samples,
            sentences,
        })
    }

    /// Text-only sentences drawn from the same world.
    pub fn sentences<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
        (0..count).map(|_| self.sample_words(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub samples: Vec<PairedSample>,
    /// Word indices behind each sample's text.
    pub sentences: Vec<Vec<usize>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn corpus(&self) -> String {
        self.sentences
            .iter()
            .map(|s| self.world.sentence_text(s))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Builds a world and `config.num_pairs` aligned pairs from one generator.
pub fn gen_synthetic_pairs<R: Rng + ?Sized>(
    config: &SynthConfig,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    let world = SyntheticWorld::new(config.clone(), rng)?;
    world.pairs(config.num_pairs, rng)
}
