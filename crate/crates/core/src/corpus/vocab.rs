use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Content tokens kept per sentence; position 0 additionally holds `[CLS]`.
pub const MAX_CONTENT_TOKENS: usize = 128;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

/// Bijective token/id map. Ids are dense; the four special tokens occupy
/// ids 0..4 in the order `[PAD] [UNK] [CLS] [MASK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const CLS_ID: u32 = 2;
    pub const MASK_ID: u32 = 3;
    pub const NUM_SPECIAL: usize = 4;

    /// Specials followed by `words` in the given order; duplicates are skipped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, MASK].map(String::from).to_vec();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < Self::NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Joins the non-special tokens of a sequence back into text.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds a vocabulary from line-delimited text. Tokens are whitespace-split
/// and lowercased; tokens seen fewer than `min_freq` times are dropped.
/// Order is by descending frequency, then lexicographic.
pub fn build_vocab(corpus: &str, min_freq: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in corpus.split_whitespace() {
        *counts.entry(tok.to_lowercase()).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(Vocabulary::from_words(kept.into_iter().map(|(t, _)| t)))
}

/// A tokenized sentence: `[CLS]` followed by up to 128 content ids, optionally
/// right-padded with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_content(content: &[u32]) -> Self {
        let content = &content[..content.len().min(MAX_CONTENT_TOKENS)];
        let mut ids = Vec::with_capacity(content.len() + 1);
        ids.push(Vocabulary::CLS_ID);
        ids.extend_from_slice(content);
        let pad_mask = vec![false; ids.len()];
        Self { ids, pad_mask }
    }

    /// Number of content tokens, excluding `[CLS]` and padding.
    pub fn len(&self) -> usize {
        self.pad_mask.iter().skip(1).filter(|&&p| !p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_len(&self) -> usize {
        self.ids.len()
    }

    pub fn content_mask(&self) -> Vec<bool> {
        content_mask(&self.pad_mask)
    }

    pub fn content_ids(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(self.content_mask())
            .filter_map(|(&id, c)| c.then_some(id))
            .collect()
    }

    /// Right-pads to `total` positions.
    pub fn padded_to(&self, total: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < total {
            out.ids.push(Vocabulary::PAD_ID);
            out.pad_mask.push(true);
        }
        out
    }
}

pub(crate) fn content_mask(pad_mask: &[bool]) -> Vec<bool> {
    pad_mask
        .iter()
        .enumerate()
        .map(|(i, &p)| i > 0 && !p)
        .collect()
}

/// Whitespace tokenization with lowercasing; unknown tokens map to `[UNK]`
/// and content beyond 128 tokens is truncated.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let ids: Vec<u32> = text
        .split_whitespace()
        .take(MAX_CONTENT_TOKENS)
        .map(|t| vocab.id(&t.to_lowercase()))
        .collect();
    TokenSequence::from_content(&ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_counts_and_min_freq() {
        let v = build_vocab("a b a", 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("a"));
        let v = build_vocab("a b a", 2).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.contains("a") && !v.contains("b"));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = build_vocab("  \n\n ", 1).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn special_ids_are_distinct_and_leading() {
        let v = build_vocab("x", 1).unwrap();
        let ids = [v.id(PAD), v.id(UNK), v.id(CLS), v.id(MASK)];
        assert_eq!(ids, [0, 1, 2, 3]);
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab("a b", 1).unwrap();
        let s = tokenize("", &v);
        assert_eq!(s.ids, vec![Vocabulary::CLS_ID]);
        assert_eq!(s.len(), 0);
        let s = tokenize("A b zzz", &v);
        assert_eq!(s.ids, vec![Vocabulary::CLS_ID, v.id("a"), v.id("b"), Vocabulary::UNK_ID]);
        assert_eq!(s.len(), 3);
        let long = vec!["a"; 200].join(" ");
        let s = tokenize(&long, &v);
        assert_eq!(s.total_len(), 129);
        assert_eq!(s.len(), 128);
    }

    #[test]
    fn padding_does_not_count_as_content() {
        let v = build_vocab("a b", 1).unwrap();
        let s = tokenize("a b", &v).padded_to(6);
        assert_eq!(s.len(), 2);
        assert_eq!(s.ids[5], Vocabulary::PAD_ID);
        assert_eq!(s.content_mask(), vec![false, true, true, false, false, false]);
    }

    #[test]
    fn detokenize_inverts_tokenize_on_known_tokens() {
        let v = build_vocab("the cat sat", 1).unwrap();
        let s = tokenize("the cat sat", &v);
        assert_eq!(v.detokenize(&s.ids), "the cat sat");
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = build_vocab("b a a", 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
