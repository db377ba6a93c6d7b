use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("nothing to mask")]
    NothingToMask,
    #[error("empty mask")]
    EmptyMask,
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("insufficient negatives: need N < M, got N = {negatives}, M = {dataset}")]
    InsufficientNegatives { negatives: usize, dataset: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("{0} head is not present on this model")]
    MissingHead(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: u64 },
    #[error("bad magic at byte offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported version {found} at byte offset {offset}")]
    VersionMismatch { found: u8, offset: usize },
    #[error("truncated payload at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("non-finite value at byte offset {offset}")]
    NonFiniteValue { offset: usize },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
