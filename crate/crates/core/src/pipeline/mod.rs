//! Run configuration, dataset directories and run manifests shared by the
//! command-line driver and the end-to-end tests.

mod config;
mod data;
mod manifest;

pub use config::{EvalConfig, RunConfig};
pub use data::{
    generate_data, load_data_dir, write_data_dir, DataDir, GeneratedData, PairRecord, CORPUS_FILE,
    FEATURES_DIR, GROUNDING_FILE, GROUNDING_MATRIX_FILE, HELDOUT_FILE, PAIRS_FILE, VOCAB_FILE,
};
pub use manifest::{file_sha256, git_describe, prepare_output_dir, RunManifest, MANIFEST_FILE};
