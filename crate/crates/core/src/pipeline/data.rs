//! On-disk layout of a generated dataset directory:
//!
//! ```text
//! corpus.txt        one sentence per line, in sample order
//! vocab.txt         one token per line, special tokens first
//! pairs.jsonl       {sample_index, text, video_id, features} per sample
//! features/*.vlkd   frame features, one file per video
//! grounding.vlkd    word prototype matrix (the answer key)
//! grounding.json    generator config and word cluster labels
//! heldout.txt       extra sentences never used for training
//! manifest.json     content hashes of all of the above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::{
    encode_matrix, load_matrix, load_video_features, tokenize, GroundingMap, PairedSample,
    SynthConfig, SyntheticDataset, SyntheticWorld, TokenSequence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const CORPUS_FILE: &str = "corpus.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const GROUNDING_MATRIX_FILE: &str = "grounding.vlkd";
pub const GROUNDING_FILE: &str = "grounding.json";
pub const HELDOUT_FILE: &str = "heldout.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub sample_index: usize,
    pub text: String,
    pub video_id: String,
    /// Path of the feature file relative to the data directory.
    pub features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundingRecord {
    synth: SynthConfig,
    n_clusters: usize,
    clusters: Vec<usize>,
}

/// A generated dataset plus the held-out sentences (as word indices).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub dataset: SyntheticDataset,
    pub heldout: Vec<Vec<usize>>,
}

/// Draws the world and pairs from the `SYNTH` stream and held-out sentences
/// from an independent stream, so changing `heldout` leaves the pairs alone.
pub fn generate_data(config: &SynthConfig, heldout: usize, seed: u64) -> Result<GeneratedData> {
    let dataset = crate::corpus::gen_synthetic_pairs(config, &mut rng::derive(seed, &[stream::SYNTH]))?;
    let heldout = dataset
        .world
        .sentences(heldout, &mut rng::derive(seed, &[stream::SYNTH, 1]));
    Ok(GeneratedData { dataset, heldout })
}

fn lines(items: impl Iterator<Item = String>) -> Vec<u8> {
    let mut out = String::new();
    for l in items {
        out.push_str(&l);
        out.push('\n');
    }
    out.into_bytes()
}

/// Writes every dataset file into `dir` (which must exist) and returns their
/// relative paths in write order.
pub fn write_data_dir(dir: impl AsRef<Path>, data: &GeneratedData) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let ds = &data.dataset;
    let world = &ds.world;
    std::fs::create_dir_all(dir.join(FEATURES_DIR))?;
    let mut written = Vec::new();
    let mut put = |rel: String, bytes: &[u8]| -> Result<()> {
        write_atomic(dir.join(&rel), bytes)?;
        written.push(rel);
        Ok(())
    };

    let texts: Vec<String> = ds.sentences.iter().map(|s| world.sentence_text(s)).collect();
    put(CORPUS_FILE.into(), &lines(texts.iter().cloned()))?;
    put(VOCAB_FILE.into(), &lines(world.vocab.tokens().iter().cloned()))?;

    let mut records = Vec::with_capacity(ds.len());
    for (sample, text) in ds.samples.iter().zip(&texts) {
        let rel = format!("{FEATURES_DIR}/{}.vlkd", sample.video.source_id);
        put(rel.clone(), &encode_matrix(&sample.video.frames))?;
        records.push(PairRecord {
            sample_index: sample.sample_index,
            text: text.clone(),
            video_id: sample.video.source_id.clone(),
            features: rel,
        });
    }
    put(
        PAIRS_FILE.into(),
        &lines(records.iter().map(|r| serde_json::to_string(r).expect("record serializes"))),
    )?;

    put(GROUNDING_MATRIX_FILE.into(), &encode_matrix(&world.grounding.prototypes))?;
    let grounding = GroundingRecord {
        synth: world.config.clone(),
        n_clusters: world.grounding.n_clusters,
        clusters: world.grounding.clusters.clone(),
    };
    put(GROUNDING_FILE.into(), serde_json::to_string_pretty(&grounding)?.as_bytes())?;
    put(
        HELDOUT_FILE.into(),
        &lines(data.heldout.iter().map(|s| world.sentence_text(s))),
    )?;
    Ok(written)
}

/// A dataset directory read back for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataDir {
    pub world: SyntheticWorld,
    pub samples: Vec<PairedSample>,
    pub heldout: Vec<TokenSequence>,
}

impl DataDir {
    pub fn vocab(&self) -> &Vocabulary {
        &self.world.vocab
    }

    pub fn texts(&self) -> Vec<TokenSequence> {
        self.samples.iter().map(|s| s.text.clone()).collect()
    }

    /// Dominant cluster per sample; ties go to an extra bucket `n_clusters`.
    pub fn sample_clusters(&self) -> Vec<usize> {
        let n = self.world.grounding.n_clusters;
        self.samples
            .iter()
            .map(|s| {
                let words: Vec<usize> = s
                    .text
                    .content_ids()
                    .iter()
                    .map(|&id| id as usize - Vocabulary::NUM_SPECIAL)
                    .collect();
                self.world.dominant_cluster(&words).unwrap_or(n)
            })
            .collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

pub fn load_data_dir(dir: impl AsRef<Path>) -> Result<DataDir> {
    let dir = dir.as_ref();
    let pairs_path = dir.join(PAIRS_FILE);
    if !pairs_path.is_file() {
        return Err(Error::Config(format!("missing pairing index {}", pairs_path.display())));
    }
    let tokens = read_lines(&dir.join(VOCAB_FILE))?;
    if tokens.len() < Vocabulary::NUM_SPECIAL {
        return Err(Error::Config(format!("{VOCAB_FILE} lacks the special tokens")));
    }
    let vocab = Vocabulary::from_words(tokens[Vocabulary::NUM_SPECIAL..].iter().cloned());
    if vocab.tokens() != tokens.as_slice() {
        return Err(Error::Config(format!("{VOCAB_FILE} has a malformed special-token header")));
    }

    let grounding: GroundingRecord = serde_json::from_str(&std::fs::read_to_string(dir.join(GROUNDING_FILE))?)?;
    let prototypes = load_matrix(dir.join(GROUNDING_MATRIX_FILE))?;
    if prototypes.nrows() != grounding.clusters.len() {
        return Err(Error::Config("grounding matrix and cluster labels disagree in length".into()));
    }
    let world = SyntheticWorld {
        config: grounding.synth,
        vocab,
        grounding: GroundingMap {
            prototypes,
            clusters: grounding.clusters,
            n_clusters: grounding.n_clusters,
        },
    };

    let mut samples = Vec::new();
    for (line_no, line) in read_lines(&pairs_path)?.iter().enumerate() {
        let r: PairRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{PAIRS_FILE} line {}: {e}", line_no + 1)))?;
        if r.sample_index != line_no {
            return Err(Error::Config(format!(
                "{PAIRS_FILE} line {}: sample_index {} out of order",
                line_no + 1,
                r.sample_index
            )));
        }
        let mut video = load_video_features(dir.join(&r.features))?;
        video.source_id = r.video_id;
        samples.push(PairedSample {
            text: tokenize(&r.text, &world.vocab),
            video,
            sample_index: r.sample_index,
        });
    }
    if samples.len() < 2 {
        return Err(Error::Config(format!("{PAIRS_FILE} needs at least 2 pairs")));
    }
    let heldout = read_lines(&dir.join(HELDOUT_FILE))?
        .iter()
        .map(|l| tokenize(l, &world.vocab))
        .collect();
    Ok(DataDir {
        world,
        samples,
        heldout,
    })
}
