//! Retrieval, linear probes and teacher-student agreement.

mod agreement;
mod probe;
mod retrieval;

pub use agreement::{agreement_metrics, Agreement};
pub use probe::{make_probe_task, probe_accuracy, probe_eval, ProbeReport, ProbeTask, PROBE_LR, PROBE_STEPS};
pub use retrieval::{
    pooled_video_bank, recall_at_k, retrieve, retrieve_videos, sentence_embedding, Hit,
    RetrievalResult,
};
