//! Text and video-feature ingestion for the pipeline.

mod features;
mod mask;
mod synth;
mod vocab;

pub use features::{
    decode_matrix, encode_matrix, load_matrix, load_video_features, save_matrix,
    save_video_features, VideoFeatures, MAX_FRAMES,
};
pub use mask::{apply_mlm_mask, Corruption, MaskPolicy, MaskedSequence};
pub use synth::{
    gen_synthetic_pairs, GroundingMap, PairedSample, SynthConfig, SyntheticDataset,
    SyntheticWorld,
};
pub use vocab::{build_vocab, tokenize, TokenSequence, Vocabulary, MAX_CONTENT_TOKENS};
pub(crate) use vocab::content_mask as vocab_content_mask;

use crate::rng;

/// Batches of dataset indices for one epoch. The order is a pure function of
/// `(seed, epoch)`; a trailing batch smaller than two samples is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derive(seed, &[rng::stream::BATCH_ORDER, epoch]));
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// The batch used at global step `step`, walking epochs in order.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = epoch_batches(n, batch_size, seed, 0).len().max(1);
    let epoch = (step / per_epoch) as u64;
    let within = step % per_epoch;
    epoch_batches(n, batch_size, seed, epoch)
        .swap_remove(within)
}
