use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PairedSample, TokenSequence};
use crate::encoder::{pool_video, EncoderModel, TokenInput};
use crate::error::{Error, Result};
use crate::objectives::kd::VokenBank;
use crate::ops::{masked_row_mean, norm};
use crate::scalar::Scalar;

/// Mean of the last hidden states over content positions (no `[CLS]`, no padding).
pub fn sentence_embedding<T: Scalar>(model: &EncoderModel<T>, seq: &impl TokenInput) -> Result<Array1<T>> {
    let h = model.encode_text(seq)?;
    masked_row_mean(h.states.view(), &h.content).map_err(|_| Error::Empty("sentence has no content tokens"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub video_id: String,
    pub score: f64,
}

/// One line of the retrieval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub topk: Vec<Hit>,
    /// 1-based rank of the ground-truth video in the full ranking.
    pub gt_rank: Option<usize>,
}

/// Exhaustive cosine ranking of `bank` rows against `query`; ties go to the
/// lower row index.
pub fn retrieve<T: Scalar>(
    query_id: &str,
    query: ArrayView1<T>,
    bank: ArrayView2<T>,
    ids: &[String],
    k: usize,
    gt: Option<usize>,
) -> Result<RetrievalResult> {
    if bank.nrows() == 0 {
        return Err(Error::Empty("retrieval bank"));
    }
    if k == 0 || k > bank.nrows() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", bank.nrows())));
    }
    if ids.len() != bank.nrows() || query.len() != bank.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ids of width {}", bank.nrows(), bank.ncols()),
            got: format!("{} ids of width {}", ids.len(), query.len()),
        });
    }
    let qn = norm(query);
    if qn == T::zero() {
        return Err(Error::DegenerateEmbedding);
    }
    let mut scored: Vec<(usize, f64)> = bank
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let rn = norm(row);
            if rn == T::zero() {
                return Err(Error::DegenerateEmbedding);
            }
            Ok((i, (query.dot(&row) / (qn * rn)).to_f64_lossy()))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let gt_rank = gt.and_then(|g| scored.iter().position(|&(i, _)| i == g)).map(|r| r + 1);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        topk: scored
            .iter()
            .take(k)
            .map(|&(i, score)| Hit {
                video_id: ids[i].clone(),
                score,
            })
            .collect(),
        gt_rank,
    })
}

/// Embeds `seq` with `model` and ranks the bank.
pub fn retrieve_videos<T: Scalar>(
    model: &EncoderModel<T>,
    seq: &TokenSequence,
    bank: &VokenBank<T>,
    k: usize,
    query_id: &str,
    gt: Option<usize>,
) -> Result<RetrievalResult> {
    let q = sentence_embedding(model, seq)?;
    retrieve(query_id, q.view(), bank.vectors.view(), &bank.ids, k, gt)
}

/// Temporally pooled video-encoder states for every sample, ids from the
/// feature source.
pub fn pooled_video_bank<T: Scalar>(video: &EncoderModel<T>, samples: &[PairedSample]) -> Result<VokenBank<T>> {
    let rows: Vec<Array1<T>> = samples
        .par_iter()
        .map(|s| pool_video(&video.encode_video(&s.video.cast())?))
        .collect::<Result<_>>()?;
    let mut vectors = Array2::zeros((rows.len(), video.d_hidden()));
    for (mut dst, r) in vectors.rows_mut().into_iter().zip(&rows) {
        dst.assign(r);
    }
    VokenBank::new(vectors, samples.iter().map(|s| s.video.source_id.clone()).collect())
}

/// Text-to-video recall@k where sample `i`'s own video is the target. Returns
/// the recall and one result per query.
pub fn recall_at_k<T: Scalar>(
    text: &EncoderModel<T>,
    video: &EncoderModel<T>,
    samples: &[PairedSample],
    k: usize,
) -> Result<(f64, Vec<RetrievalResult>)> {
    let bank = pooled_video_bank(video, samples)?;
    let results: Vec<RetrievalResult> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| retrieve_videos(text, &s.text, &bank, k, &format!("q{i:05}"), Some(i)))
        .collect::<Result<_>>()?;
    let hits = results.iter().filter(|r| r.gt_rank.is_some_and(|g| g <= k)).count();
    Ok((hits as f64 / samples.len() as f64, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::layers::trunc_normal;
    use crate::encoder::EncoderConfig;
    use crate::rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn self_retrieval_ranks_first_with_unit_score() {
        let bank: Array2<f64> = trunc_normal(&mut rng::derive(0, &[]), (6, 4), 1.0);
        let r = retrieve("q", bank.row(4), bank.view(), &ids(6), 3, Some(4)).unwrap();
        assert_eq!(r.topk[0].video_id, "v4");
        assert!((r.topk[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.gt_rank, Some(1));
        assert_eq!(r.topk.len(), 3);
    }

    #[test]
    fn full_ranking_is_a_permutation_with_non_increasing_scores() {
        let bank: Array2<f64> = trunc_normal(&mut rng::derive(1, &[]), (7, 3), 1.0);
        let q = ndarray::array![0.2, -1.0, 0.4];
        let r = retrieve("q", q.view(), bank.view(), &ids(7), 7, None).unwrap();
        let mut seen: Vec<&str> = r.topk.iter().map(|h| h.video_id.as_str()).collect();
        seen.sort();
        assert_eq!(seen, ids(7).iter().map(String::as_str).collect::<Vec<_>>());
        assert!(r.topk.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn agrees_with_brute_force() {
        for seed in 0..30 {
            let bank: Array2<f64> = trunc_normal(&mut rng::derive(seed, &[1]), (12, 5), 1.0);
            let q: Array2<f64> = trunc_normal(&mut rng::derive(seed, &[2]), (1, 5), 1.0);
            let r = retrieve("q", q.row(0), bank.view(), &ids(12), 1, None).unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for i in 0..12 {
                let b = bank.row(i);
                let c = q.row(0).dot(&b) / (q.row(0).dot(&q.row(0)).sqrt() * b.dot(&b).sqrt());
                if c > best.1 {
                    best = (i, c);
                }
            }
            assert_eq!(r.topk[0].video_id, format!("v{}", best.0));
        }
    }

    #[test]
    fn ties_break_by_lower_id_and_errors_are_reported() {
        let bank = ndarray::array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let r = retrieve("q", ndarray::array![2.0, 0.0].view(), bank.view(), &ids(3), 2, None).unwrap();
        assert_eq!(r.topk[0].video_id, "v0");
        assert_eq!(r.topk[1].video_id, "v1");
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(retrieve("q", ndarray::array![1.0, 0.0].view(), empty.view(), &[], 1, None).is_err());
        assert!(retrieve("q", ndarray::array![1.0, 0.0].view(), bank.view(), &ids(3), 4, None).is_err());
    }

    #[test]
    fn sentence_embedding_is_the_content_mean() {
        let cfg = EncoderConfig {
            n_layers: 1,
            d_hidden: 8,
            n_heads: 2,
            d_ff: 8,
            ..EncoderConfig::preset("toy-2L-64H", 12).unwrap()
        };
        let m = EncoderModel::<f64>::init(cfg, &mut rng::derive(3, &[])).unwrap();
        let seq = TokenSequence::from_content(&[5, 6, 7]).padded_to(6);
        let h = m.encode_text(&seq).unwrap();
        let e = sentence_embedding(&m, &seq).unwrap();
        let oracle = (&h.states.row(1) + &h.states.row(2) + &h.states.row(3)) / 3.0;
        for (a, b) in e.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = TokenSequence::from_content(&[9]);
        let h1 = m.encode_text(&one).unwrap();
        assert_eq!(sentence_embedding(&m, &one).unwrap(), h1.states.row(1).to_owned());
        assert!(sentence_embedding(&m, &TokenSequence::from_content(&[])).is_err());
    }
}
