use ndarray::{Array1, Array2};

use super::*;
use crate::corpus::{TokenSequence, VideoFeatures};
use crate::gradcheck::{central_difference, max_relative_error_with_floor, FD_STEP};
use crate::params::Parameters;
use crate::rng;

fn tiny_text(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        d_hidden: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: vocab,
        max_positions: 10,
        input_dim: None,
        tie_lm_head: true,
        lm_head: true,
        distill_dim: Some(8),
        voken_classes: Some(5),
        ln_eps: 1e-5,
    }
}

/// Re-randomizes every parameter so gradients are not dominated by the
/// identity-like initial LayerNorm affine maps.
fn jitter<T: crate::Scalar>(m: &mut EncoderModel<T>, seed: u64, scale: f64) {
    let mut r = rng::derive(seed, &[99]);
    m.visit_mut("", &mut |_, a| {
        let noise = layers::trunc_normal::<T, _>(&mut r, a.dim(), scale);
        *a += &noise;
    });
}

#[test]
fn cls_only_input_gives_one_row() {
    let m = EncoderModel::<f32>::init(tiny_text(10), &mut rng::derive(1, &[])).unwrap();
    let h = m.encode_text(&TokenSequence::from_content(&[])).unwrap();
    assert_eq!(h.states.dim(), (1, 8));
    assert_eq!(h.num_content(), 0);
}

#[test]
fn forward_is_deterministic() {
    let m = EncoderModel::<f32>::init(tiny_text(10), &mut rng::derive(1, &[])).unwrap();
    let s = TokenSequence::from_content(&[4, 5, 6]);
    assert_eq!(m.encode_text(&s).unwrap(), m.encode_text(&s).unwrap());
}

#[test]
fn position_embeddings_make_order_matter() {
    let m = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(2, &[])).unwrap();
    let a = m.encode_text(&TokenSequence::from_content(&[4, 5, 6])).unwrap();
    let b = m.encode_text(&TokenSequence::from_content(&[5, 4, 6])).unwrap();
    let diff = (&a.states - &b.states).mapv(f64::abs).sum();
    assert!(diff > 1e-6);
}

#[test]
fn out_of_vocab_id_is_rejected() {
    let m = EncoderModel::<f32>::init(tiny_text(10), &mut rng::derive(1, &[])).unwrap();
    let err = m.encode_text(&TokenSequence::from_content(&[4, 10])).unwrap_err();
    assert!(matches!(err, crate::Error::TokenOutOfVocab { id: 10, vocab: 10 }));
}

#[test]
fn padding_never_changes_content_outputs() {
    let m = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(3, &[])).unwrap();
    let s = TokenSequence::from_content(&[4, 7, 9, 5]);
    let a = m.encode_text(&s).unwrap();
    for total in 6..=10 {
        let b = m.encode_text(&s.padded_to(total)).unwrap();
        assert_eq!(b.content, [a.content.clone(), vec![false; total - 5]].concat());
        for i in 0..5 {
            for j in 0..8 {
                assert!((a.states[[i, j]] - b.states[[i, j]]).abs() < 1e-12);
            }
        }
    }
}

fn tiny_video(d_v: usize, positions: usize) -> EncoderConfig {
    EncoderConfig {
        max_positions: positions,
        ..tiny_text(10).as_video(d_v)
    }
}

#[test]
fn video_shapes() {
    let m = EncoderModel::<f32>::init(tiny_video(3, 512), &mut rng::derive(4, &[])).unwrap();
    let one = VideoFeatures {
        frames: Array2::ones((1, 3)),
        source_id: "a".into(),
    };
    assert_eq!(m.encode_video(&one).unwrap().states.dim(), (1, 8));
    let long = VideoFeatures {
        frames: Array2::ones((512, 3)),
        source_id: "b".into(),
    };
    assert_eq!(m.encode_video(&long).unwrap().states.dim(), (512, 8));
    let wrong = VideoFeatures {
        frames: Array2::ones((2, 4)),
        source_id: "c".into(),
    };
    assert!(matches!(m.encode_video(&wrong), Err(crate::Error::ShapeMismatch { .. })));
}

#[test]
fn zero_input_with_zero_projection_propagates_bias_only() {
    let mut m = EncoderModel::<f64>::init(tiny_video(3, 16), &mut rng::derive(5, &[])).unwrap();
    let InputLayer::Frames(proj) = &mut m.input else { unreachable!() };
    proj.weight.fill(0.0);
    proj.bias = Array2::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1 - 0.3);
    m.positions.fill(0.0);
    let h = m
        .encode_video(&VideoFeatures {
            frames: Array2::zeros((4, 3)),
            source_id: "z".into(),
        })
        .unwrap();
    // Oracle: a single frame carrying only the bias, run through the same
    // frozen blocks. Identical inputs with full attention give identical rows.
    let single = m
        .encode_video(&VideoFeatures {
            frames: Array2::zeros((1, 3)),
            source_id: "z1".into(),
        })
        .unwrap();
    for row in h.states.rows() {
        for (a, b) in row.iter().zip(single.states.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pooling() {
    let r = Array1::from(vec![1.0, -2.0, 3.5]);
    let h = HiddenStates {
        states: Array2::from_shape_fn((5, 3), |(_, j)| r[j]),
        content: vec![true; 5],
    };
    assert_eq!(pool_video(&h).unwrap(), r);
    let h = HiddenStates {
        states: ndarray::stack![ndarray::Axis(0), r.view(), (-&r).view()],
        content: vec![true; 2],
    };
    assert_eq!(pool_video(&h).unwrap(), Array1::<f64>::zeros(3));
    let x = layers::trunc_normal::<f64, _>(&mut rng::derive(6, &[]), (3, 4), 1.0);
    let pooled = pool_video(&HiddenStates {
        states: x.clone(),
        content: vec![true; 3],
    })
    .unwrap();
    for j in 0..4 {
        let oracle = (x[[0, j]] + x[[1, j]] + x[[2, j]]) / 3.0;
        assert!((pooled[j] - oracle).abs() < 1e-15);
    }
    let empty = HiddenStates::<f64> {
        states: Array2::zeros((0, 3)),
        content: vec![],
    };
    assert!(pool_video(&empty).is_err());
}

#[test]
fn lm_head_affine_degenerate_case_and_normalization() {
    let mut cfg = tiny_text(10);
    cfg.tie_lm_head = false;
    let mut m = EncoderModel::<f64>::init(cfg, &mut rng::derive(7, &[])).unwrap();
    let head = m.lm_head.as_mut().unwrap();
    head.weight.as_mut().unwrap().fill(0.0);
    head.bias = Array2::from_shape_fn((1, 10), |(_, j)| j as f64);
    let logits = m.lm_logits(&Array2::zeros((3, 8))).unwrap();
    for row in logits.rows() {
        assert_eq!(row, head_bias(&m));
    }
    let m = EncoderModel::<f32>::init(tiny_text(10), &mut rng::derive(8, &[])).unwrap();
    let h = m.encode_text(&TokenSequence::from_content(&[4, 5])).unwrap();
    let p = crate::ops::softmax_rows(m.lm_logits(&h.states).unwrap().view(), 1.0);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

fn head_bias(m: &EncoderModel<f64>) -> ndarray::ArrayView1<'_, f64> {
    m.lm_head.as_ref().unwrap().bias.row(0)
}

#[test]
fn distill_head_relu_cases() {
    let mut m = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(9, &[])).unwrap();
    let head = m.distill_head.as_mut().unwrap();
    head.hidden.weight = Array2::eye(8);
    head.output.weight = Array2::eye(8);
    head.hidden.bias.fill(0.0);
    head.output.bias.fill(0.0);
    let h = Array2::from_shape_fn((3, 8), |(i, j)| (i + j) as f64 * 0.25);
    assert_eq!(m.distill(&h).unwrap().0, h);
    let b2 = Array2::from_shape_fn((1, 8), |(_, j)| j as f64);
    m.distill_head.as_mut().unwrap().output.bias = b2.clone();
    let neg = -&h;
    for row in m.distill(&neg).unwrap().0.rows() {
        assert_eq!(row, b2.row(0));
    }
    let mut plain = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(9, &[])).unwrap();
    plain.distill_head = None;
    assert!(matches!(plain.distill(&h), Err(crate::Error::MissingHead(_))));
}

#[test]
fn distill_head_matches_two_matrix_oracle() {
    let m = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(10, &[])).unwrap();
    let head = m.distill_head.as_ref().unwrap();
    let h = layers::trunc_normal::<f64, _>(&mut rng::derive(11, &[]), (4, 8), 1.0);
    let out = m.distill(&h).unwrap().0;
    for i in 0..4 {
        let mut hidden = [0.0; 8];
        for (k, hk) in hidden.iter_mut().enumerate() {
            let mut acc = head.hidden.bias[[0, k]];
            for j in 0..8 {
                acc += h[[i, j]] * head.hidden.weight[[j, k]];
            }
            *hk = acc.max(0.0);
        }
        for o in 0..8 {
            let mut acc = head.output.bias[[0, o]];
            for (k, hk) in hidden.iter().enumerate() {
                acc += hk * head.output.weight[[k, o]];
            }
            assert!((acc - out[[i, o]]).abs() < 1e-14);
        }
    }
}

/// Runs `probe(model)` as a scalar of the parameter vector and compares the
/// analytic gradient from `backward` with central differences.
fn check_params<F, B>(model: &EncoderModel<f64>, probe: F, backward: B) -> f64
where
    F: Fn(&EncoderModel<f64>) -> f64,
    B: Fn(&EncoderModel<f64>, &mut EncoderModel<f64>),
{
    let mut grad = model.zeroed();
    backward(model, &mut grad);
    let flat: Vec<f64> = model.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let analytic: Vec<f64> = grad.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let numeric = central_difference(
        |x| {
            let mut m = model.clone();
            let mut k = 0;
            m.visit_mut("", &mut |_, a| {
                for v in a.iter_mut() {
                    *v = x[k];
                    k += 1;
                }
            });
            probe(&m)
        },
        &flat,
        FD_STEP,
    );
    // Key biases have an exactly zero gradient (softmax shift invariance), so
    // the floor has to sit above the roundoff of a full-model probe.
    max_relative_error_with_floor(&analytic, &numeric, 1e-4)
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    let mut m = EncoderModel::<f64>::init(tiny_text(10), &mut rng::derive(12, &[])).unwrap();
    jitter(&mut m, 12, 0.3);
    let seq = TokenSequence::from_content(&[4, 9, 4, 6]).padded_to(7);
    let weights = layers::trunc_normal::<f64, _>(&mut rng::derive(13, &[]), (7, 8), 1.0);
    let lm_w = layers::trunc_normal::<f64, _>(&mut rng::derive(14, &[]), (7, 10), 1.0);
    let dh_w = layers::trunc_normal::<f64, _>(&mut rng::derive(15, &[]), (7, 8), 1.0);
    let vk_w = layers::trunc_normal::<f64, _>(&mut rng::derive(16, &[]), (7, 5), 1.0);
    let probe = |m: &EncoderModel<f64>| {
        let h = m.encode_text(&seq).unwrap().states;
        let mut s = (&h * &weights).sum();
        s += (&m.lm_logits(&h).unwrap() * &lm_w).sum();
        s += (&m.distill(&h).unwrap().0 * &dh_w).sum();
        s += (&m.voken_logits(&h).unwrap() * &vk_w).sum();
        s
    };
    let err = check_params(&m, probe, |m, g| {
        let (h, cache) = m.forward_tokens(&seq.ids, &seq.pad_mask).unwrap();
        let mut dh = weights.clone();
        dh += &m.lm_backward(&h.states, &lm_w, g);
        let (_, dc) = m.distill(&h.states).unwrap();
        dh += &m.distill_backward(&dc, &dh_w, g);
        dh += &m.voken_backward(&h.states, &vk_w, g);
        m.backward(&cache, &dh, g);
    });
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn untied_lm_head_gradients_match_finite_differences() {
    let mut cfg = tiny_text(10);
    cfg.tie_lm_head = false;
    cfg.distill_dim = None;
    cfg.voken_classes = None;
    let mut m = EncoderModel::<f64>::init(cfg, &mut rng::derive(17, &[])).unwrap();
    jitter(&mut m, 17, 0.3);
    let seq = TokenSequence::from_content(&[5, 8, 7]);
    let lm_w = layers::trunc_normal::<f64, _>(&mut rng::derive(18, &[]), (4, 10), 1.0);
    let err = check_params(
        &m,
        |m| (&m.lm_logits(&m.encode_text(&seq).unwrap().states).unwrap() * &lm_w).sum(),
        |m, g| {
            let (h, cache) = m.forward_tokens(&seq.ids, &seq.pad_mask).unwrap();
            let dh = m.lm_backward(&h.states, &lm_w, g);
            m.backward(&cache, &dh, g);
        },
    );
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn video_encoder_gradients_match_finite_differences() {
    let mut m = EncoderModel::<f64>::init(tiny_video(3, 8), &mut rng::derive(19, &[])).unwrap();
    jitter(&mut m, 19, 0.3);
    let frames = layers::trunc_normal::<f64, _>(&mut rng::derive(20, &[]), (5, 3), 1.0);
    let weights = layers::trunc_normal::<f64, _>(&mut rng::derive(21, &[]), (5, 8), 1.0);
    let err = check_params(
        &m,
        |m| (&m.forward_frames(&frames).unwrap().0.states * &weights).sum(),
        |m, g| {
            let (_, cache) = m.forward_frames(&frames).unwrap();
            m.backward(&cache, &weights, g);
        },
    );
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn presets_satisfy_shape_contracts() {
    for p in ["toy-2L-64H", "bert-6L-512H"] {
        let cfg = EncoderConfig::preset(p, 12).unwrap();
        let d = cfg.d_hidden;
        let m = EncoderModel::<f32>::init(cfg.clone(), &mut rng::derive(22, &[])).unwrap();
        let h = m.encode_text(&TokenSequence::from_content(&[4, 5, 6])).unwrap();
        assert_eq!(h.states.dim(), (4, d));
        let v = EncoderModel::<f32>::init(cfg.as_video(6), &mut rng::derive(23, &[])).unwrap();
        let hv = v
            .encode_video(&VideoFeatures {
                frames: Array2::ones((7, 6)),
                source_id: "p".into(),
            })
            .unwrap();
        assert_eq!(hv.states.dim(), (7, d));
        assert_eq!(m.lm_logits(&h.states).unwrap().dim(), (4, 12));
    }
}
