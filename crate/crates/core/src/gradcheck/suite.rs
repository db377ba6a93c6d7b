//! Finite-difference check of every training loss on random small instances.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{central_difference, max_relative_error, FD_STEP};
use crate::corpus::MaskedSequence;
use crate::encoder::layers::trunc_normal;
use crate::objectives::kd::{
    crd_loss, crd_loss_with_grad, l2_regression_loss, l2_regression_loss_with_grad, nst_mmd2,
    nst_mmd2_with_grad, soft_label_loss, soft_label_loss_with_grad, voken_loss,
    voken_loss_with_grad, CrdState,
};
use crate::objectives::teacher::{
    contrastive_hinge_loss, contrastive_hinge_loss_with_grad, hinge_arguments, mlm_loss,
    mlm_loss_with_grad, ContrastiveBatch,
};
use crate::objectives::Reduction;
use crate::params::Parameters;
use crate::rng::{self, stream};
use crate::Result;

pub const GRADCHECK_INSTANCES: usize = 20;

/// Hinge instances with an argument closer than this to zero are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Rand = rng::Rng;

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn reshape(x: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), x.to_vec()).expect("length matches shape")
}

fn normal(r: &mut Rand, rows: usize, cols: usize) -> Array2<f64> {
    trunc_normal(r, (rows, cols), 1.0)
}

fn hinge_instance(r: &mut Rand) -> Result<f64> {
    loop {
        let (n, n_neg, d) = (r.random_range(1..5), r.random_range(1..5), r.random_range(2..7));
        let text = normal(r, n, d);
        let neg_text = normal(r, n_neg, d);
        let videos = normal(r, 2, d);
        let margin = r.random_range(0.2..1.0);
        let batch = ContrastiveBatch {
            text: text.view(),
            neg_text: neg_text.view(),
            video: videos.row(0),
            neg_video: videos.row(1),
            margin,
        };
        let args = hinge_arguments(&batch)?;
        if args.iter().any(|&(a, b)| a.abs() < KINK_MARGIN || b.abs() < KINK_MARGIN) {
            continue;
        }
        let (_, g) = contrastive_hinge_loss_with_grad(&batch)?;
        let analytic: Vec<f64> = [flat(&g.text), flat(&g.neg_text), g.video.to_vec(), g.neg_video.to_vec()].concat();
        let x: Vec<f64> = [flat(&text), flat(&neg_text), flat(&videos)].concat();
        let numeric = central_difference(
            |p| {
                let t = reshape(&p[..n * d], n, d);
                let nt = reshape(&p[n * d..(n + n_neg) * d], n_neg, d);
                let v = reshape(&p[(n + n_neg) * d..], 2, d);
                contrastive_hinge_loss(&ContrastiveBatch {
                    text: t.view(),
                    neg_text: nt.view(),
                    video: v.row(0),
                    neg_video: v.row(1),
                    margin,
                })
                .expect("valid instance")
            },
            &x,
            FD_STEP,
        );
        return Ok(max_relative_error(&analytic, &numeric));
    }
}

fn mlm_instance(r: &mut Rand) -> Result<f64> {
    let (len, vocab) = (r.random_range(2..8), r.random_range(3..12));
    let logits = normal(r, len, vocab);
    let mut mask_positions: Vec<usize> = (0..len).filter(|_| r.random_bool(0.5)).collect();
    if mask_positions.is_empty() {
        mask_positions.push(0);
    }
    let original_ids = mask_positions.iter().map(|_| r.random_range(0..vocab as u32)).collect();
    let masked = MaskedSequence {
        ids: vec![0; len],
        pad_mask: vec![false; len],
        mask_positions,
        original_ids,
    };
    let (_, g) = mlm_loss_with_grad(logits.view(), &masked, Reduction::Mean)?;
    let numeric = central_difference(
        |p| mlm_loss(reshape(p, len, vocab).view(), &masked, Reduction::Mean).expect("valid"),
        &flat(&logits),
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&g), &numeric))
}

fn soft_label_instance(r: &mut Rand) -> Result<f64> {
    let (len, vocab) = (r.random_range(1..6), r.random_range(2..10));
    let teacher = normal(r, len, vocab);
    let student = normal(r, len, vocab);
    let tau = r.random_range(0.5..4.0);
    let (_, g) = soft_label_loss_with_grad(teacher.view(), student.view(), tau, Reduction::Mean)?;
    let numeric = central_difference(
        |p| soft_label_loss(teacher.view(), reshape(p, len, vocab).view(), tau, Reduction::Mean).expect("valid"),
        &flat(&student),
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&g), &numeric))
}

fn l2_instance(r: &mut Rand) -> Result<f64> {
    let (len, d) = (r.random_range(1..6), r.random_range(1..9));
    let teacher = normal(r, len, d);
    let student = normal(r, len, d);
    let (_, g) = l2_regression_loss_with_grad(student.view(), teacher.view(), Reduction::Mean)?;
    let numeric = central_difference(
        |p| l2_regression_loss(reshape(p, len, d).view(), teacher.view(), Reduction::Mean).expect("valid"),
        &flat(&student),
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&g), &numeric))
}

fn nst_instance(r: &mut Rand) -> Result<f64> {
    let (len, ds, dt) = (r.random_range(2..8), r.random_range(1..9), r.random_range(1..9));
    let student = normal(r, len, ds);
    let teacher = normal(r, len, dt);
    let sigma = r.random_range(0.5..2.0);
    let (_, g) = nst_mmd2_with_grad(student.view(), teacher.view(), sigma, true)?;
    let numeric = central_difference(
        |p| nst_mmd2(reshape(p, len, ds).view(), teacher.view(), sigma, true).expect("valid"),
        &flat(&student),
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&g), &numeric))
}

fn crd_instance(r: &mut Rand) -> Result<f64> {
    let (len, ds, dt, dp) = (r.random_range(1..4), r.random_range(2..6), r.random_range(2..6), r.random_range(2..5));
    let m = r.random_range(3..12);
    let n = r.random_range(1..m.min(5));
    let own = r.random_range(0..m);
    let mut state = CrdState::<f64>::init(r, ds, dt, dp, m, 0.5);
    // Unit-scale projections: the training init is small enough that the
    // normalized embedding's curvature swamps a 1e-5 difference quotient.
    state.proj.visit_mut("", &mut |_, a| {
        let noise: Array2<f64> = trunc_normal(r, a.dim(), 1.0);
        *a += &noise;
    });
    let negatives = crate::objectives::kd::draw_negatives(r, own, n, m)?;
    let temperature = if r.random_bool(0.5) { Some(r.random_range(0.5..2.0)) } else { None };
    let student = normal(r, len, ds);
    let teacher = normal(r, len, dt);
    let loss = |s: &Array2<f64>, st: &CrdState<f64>| {
        crd_loss(s.view(), teacher.view(), own, &negatives, st, temperature, Reduction::Mean).expect("valid")
    };
    let (_, g) = crd_loss_with_grad(student.view(), teacher.view(), own, &negatives, &state, temperature, Reduction::Mean)?;
    let numeric = central_difference(|p| loss(&reshape(p, len, ds), &state), &flat(&student), FD_STEP);
    let mut err = max_relative_error(&flat(&g.student), &numeric);

    let params: Vec<f64> = state.proj.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let analytic: Vec<f64> = g.proj.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
    let numeric = central_difference(
        |p| {
            let mut st = state.clone();
            let mut k = 0;
            st.proj.visit_mut("", &mut |_, a| {
                for v in a.iter_mut() {
                    *v = p[k];
                    k += 1;
                }
            });
            loss(&student, &st)
        },
        &params,
        FD_STEP,
    );
    err = err.max(max_relative_error(&analytic, &numeric));
    Ok(err)
}

fn voken_instance(r: &mut Rand) -> Result<f64> {
    let (len, k) = (r.random_range(1..6), r.random_range(2..12));
    let logits = normal(r, len, k);
    let assignment: Vec<usize> = (0..len).map(|_| r.random_range(0..k)).collect();
    let (_, g) = voken_loss_with_grad(logits.view(), &assignment, Reduction::Mean)?;
    let numeric = central_difference(
        |p| voken_loss(reshape(p, len, k).view(), &assignment, Reduction::Mean).expect("valid"),
        &flat(&logits),
        FD_STEP,
    );
    Ok(max_relative_error(&flat(&g), &numeric))
}

/// Compares analytic and central-difference gradients for each loss over
/// `GRADCHECK_INSTANCES` random double-precision instances. Hinge instances
/// near a kink are redrawn.
pub fn loss_gradcheck_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let checks: [(&str, fn(&mut Rand) -> Result<f64>); 7] = [
        ("contrastive", hinge_instance),
        ("mlm", mlm_instance),
        ("soft_label", soft_label_instance),
        ("l2", l2_instance),
        ("nst", nst_instance),
        ("crd", crd_instance),
        ("voken", voken_instance),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut worst = 0.0f64;
            for inst in 0..GRADCHECK_INSTANCES {
                let mut r = rng::derive(seed, &[stream::GRADCHECK, i as u64, inst as u64]);
                worst = worst.max(check(&mut r)?);
            }
            Ok(GradcheckReport {
                loss: name.to_string(),
                instances: GRADCHECK_INSTANCES,
                max_rel_err: worst,
            })
        })
        .collect()
}
