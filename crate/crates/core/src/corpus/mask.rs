use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{content_mask, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// How selected positions are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Every selected position becomes `[MASK]`.
    #[default]
    MaskOnly,
    /// 80% `[MASK]`, 10% random non-special token, 10% unchanged.
    Bert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub rate: f64,
    pub corruption: Corruption,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            rate: 0.15,
            corruption: Corruption::MaskOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    /// Sorted positions that were selected for prediction.
    pub mask_positions: Vec<usize>,
    /// Source ids at `mask_positions`, in the same order.
    pub original_ids: Vec<u32>,
}

impl MaskedSequence {
    pub fn content_mask(&self) -> Vec<bool> {
        content_mask(&self.pad_mask)
    }

    /// The unmasked sequence this was built from.
    pub fn source(&self) -> TokenSequence {
        let mut ids = self.ids.clone();
        for (&p, &o) in self.mask_positions.iter().zip(&self.original_ids) {
            ids[p] = o;
        }
        TokenSequence {
            ids,
            pad_mask: self.pad_mask.clone(),
        }
    }

    /// Wraps a sequence with nothing masked (used for alternate teacher inputs).
    pub fn unmasked(seq: &TokenSequence) -> Self {
        Self {
            ids: seq.ids.clone(),
            pad_mask: seq.pad_mask.clone(),
            mask_positions: Vec::new(),
            original_ids: Vec::new(),
        }
    }
}

/// Number of positions selected from `len` content tokens: `round(rate * len)`,
/// at least one.
pub fn mask_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).round() as usize).clamp(1, len)
}

/// Selects `round(rate * |x|)` content positions (min 1) uniformly without
/// replacement. `[CLS]` and padding are never selected.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !(policy.rate > 0.0 && policy.rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate must lie in (0, 1), got {}",
            policy.rate
        )));
    }
    let content: Vec<usize> = seq
        .content_mask()
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i))
        .collect();
    if content.is_empty() {
        return Err(Error::NothingToMask);
    }
    let k = mask_count(content.len(), policy.rate);
    let mut positions: Vec<usize> = sample(rng, content.len(), k)
        .into_iter()
        .map(|j| content[j])
        .collect();
    positions.sort_unstable();

    let mut ids = seq.ids.clone();
    let original_ids: Vec<u32> = positions.iter().map(|&p| seq.ids[p]).collect();
    for &p in &positions {
        ids[p] = match policy.corruption {
            Corruption::MaskOnly => Vocabulary::MASK_ID,
            Corruption::Bert => {
                let u: f64 = rng.random();
                if u < 0.8 || vocab_size <= Vocabulary::NUM_SPECIAL {
                    Vocabulary::MASK_ID
                } else if u < 0.9 {
                    rng.random_range(Vocabulary::NUM_SPECIAL as u32..vocab_size as u32)
                } else {
                    seq.ids[p]
                }
            }
        };
    }
    Ok(MaskedSequence {
        ids,
        pad_mask: seq.pad_mask.clone(),
        mask_positions: positions,
        original_ids,
    })
}
