//! Contrastive representation distillation with a per-sample memory buffer.
//!
//! The critic is `h(s, t) = e^z / (e^z + N/M)` with `z = f1(s) . f2(t)`, where
//! `f1`, `f2` are linear maps followed by L2 normalization, N is the number of
//! negatives per positive and M the dataset cardinality. Per position the loss
//! is `-log h(s, t+) - sum_k log(1 - h(s, t_k))` over buffer negatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::layers::Linear;
use crate::error::{Error, Result};
use crate::objectives::Reduction;
use crate::ops::{l2_normalize, l2_normalize_backward};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CrdProjections<T> {
    /// Student-side map, `d_student -> d_proj`.
    pub f1: Linear<T>,
    /// Teacher-side map, `d_teacher -> d_proj`.
    pub f2: Linear<T>,
}

impl<T: Scalar> Parameters<T> for CrdProjections<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.f1.visit(&join(prefix, "f1"), f);
        self.f2.visit(&join(prefix, "f2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.f1.visit_mut(&join(prefix, "f1"), f);
        self.f2.visit_mut(&join(prefix, "f2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrdState<T> {
    pub proj: CrdProjections<T>,
    /// `M x d_proj` unit rows keyed by sample index.
    pub buffer: Array2<T>,
    pub momentum: f64,
}

fn random_unit_rows<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<T> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || {
        T::of(StandardNormal.sample(rng))
    });
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n);
    }
    m
}

/// Only the projections are trainable; the buffer is state, not a parameter.
impl<T: Scalar> Parameters<T> for CrdState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.proj.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.proj.visit_mut(prefix, f);
    }
}

impl<T: Scalar> CrdState<T> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        d_student: usize,
        d_teacher: usize,
        d_proj: usize,
        dataset_size: usize,
        momentum: f64,
    ) -> Self {
        let proj = CrdProjections {
            f1: Linear::init(rng, d_student, d_proj),
            f2: Linear::init(rng, d_teacher, d_proj),
        };
        Self {
            proj,
            buffer: random_unit_rows(rng, dataset_size, d_proj),
            momentum,
        }
    }

    pub fn dataset_size(&self) -> usize {
        self.buffer.nrows()
    }

    /// `normalize(f2(t))`.
    pub fn embed_teacher(&self, t: ArrayView1<T>) -> Result<Array1<T>> {
        let z = self.proj.f2.forward(&t.to_owned().insert_axis(ndarray::Axis(0)));
        Ok(l2_normalize(z.row(0))?.0)
    }

    /// Stores `normalize(f2(t))` at `sample_index`, blended with the previous
    /// row as `normalize(m * old + (1 - m) * new)` when momentum is nonzero.
    pub fn update(&mut self, sample_index: usize, t: ArrayView1<T>) -> Result<()> {
        let embedded = self.embed_teacher(t)?;
        self.store(sample_index, embedded.view())
    }

    /// Writes an already projected, unit-norm row with the momentum rule.
    pub fn store(&mut self, sample_index: usize, embedded: ArrayView1<T>) -> Result<()> {
        let m = self.dataset_size();
        if sample_index >= m {
            return Err(Error::IndexOutOfRange {
                index: sample_index,
                len: m,
            });
        }
        let mom = T::of(self.momentum);
        let blended = if self.momentum == 0.0 {
            embedded.to_owned()
        } else {
            &self.buffer.row(sample_index) * mom + &embedded * (T::one() - mom)
        };
        let (unit, _) = l2_normalize(blended.view())?;
        self.buffer.row_mut(sample_index).assign(&unit);
        Ok(())
    }
}

/// Draws `n` distinct buffer indices from `[0, m)` excluding `own`.
pub fn draw_negatives<R: Rng + ?Sized>(rng: &mut R, own: usize, n: usize, m: usize) -> Result<Vec<usize>> {
    if n == 0 || n >= m {
        return Err(Error::InsufficientNegatives {
            negatives: n,
            dataset: m,
        });
    }
    Ok(sample(rng, m - 1, n)
        .into_iter()
        .map(|k| if k >= own { k + 1 } else { k })
        .collect())
}

/// `h(s, t) = e^z / (e^z + N/M)`.
pub fn crd_critic<T: Scalar>(score: T, n_over_m: T) -> T {
    T::one() / (T::one() + n_over_m * (-score).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrdGrad<T> {
    pub student: Array2<T>,
    pub proj: CrdProjections<T>,
}

fn validate<T: Scalar>(
    student: &ArrayView2<T>,
    teacher: &ArrayView2<T>,
    sample_index: usize,
    negatives: &[usize],
    state: &CrdState<T>,
) -> Result<()> {
    let m = state.dataset_size();
    if negatives.is_empty() || negatives.len() >= m {
        return Err(Error::InsufficientNegatives {
            negatives: negatives.len(),
            dataset: m,
        });
    }
    if sample_index >= m {
        return Err(Error::IndexOutOfRange {
            index: sample_index,
            len: m,
        });
    }
    if let Some(&k) = negatives.iter().find(|&&k| k >= m || k == sample_index) {
        return Err(Error::InvalidArgument(format!(
            "negative index {k} is out of range or equals the sample's own index"
        )));
    }
    if student.nrows() != teacher.nrows() || student.nrows() == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("{} >= 1 positions", student.nrows()),
            got: teacher.nrows().to_string(),
        });
    }
    Ok(())
}

/// Per-position positive-pair CRD loss against buffer negatives.
pub fn crd_loss<T: Scalar>(
    student: ArrayView2<T>,
    teacher: ArrayView2<T>,
    sample_index: usize,
    negatives: &[usize],
    state: &CrdState<T>,
    temperature: Option<T>,
    reduction: Reduction,
) -> Result<T> {
    crd_forward(student, teacher, sample_index, negatives, state, temperature, reduction, false)
        .map(|(l, _)| l)
}

/// CRD loss with gradients for the student rows and both projections.
pub fn crd_loss_with_grad<T: Scalar>(
    student: ArrayView2<T>,
    teacher: ArrayView2<T>,
    sample_index: usize,
    negatives: &[usize],
    state: &CrdState<T>,
    temperature: Option<T>,
    reduction: Reduction,
) -> Result<(T, CrdGrad<T>)> {
    crd_forward(student, teacher, sample_index, negatives, state, temperature, reduction, true)
        .map(|(l, g)| (l, g.expect("requested")))
}

#[allow(clippy::too_many_arguments)]
fn crd_forward<T: Scalar>(
    student: ArrayView2<T>,
    teacher: ArrayView2<T>,
    sample_index: usize,
    negatives: &[usize],
    state: &CrdState<T>,
    temperature: Option<T>,
    reduction: Reduction,
    want_grad: bool,
) -> Result<(T, Option<CrdGrad<T>>)> {
    validate(&student, &teacher, sample_index, negatives, state)?;
    let n_over_m = T::of(negatives.len() as f64 / state.dataset_size() as f64);
    let inv_temp = temperature.map_or(T::one(), |t| T::one() / t);
    let s_raw = state.proj.f1.forward(&student.to_owned());
    let t_raw = state.proj.f2.forward(&teacher.to_owned());
    let positions = student.nrows();
    let div: T = reduction.divisor(positions);

    let mut ds_proj = Array2::zeros(s_raw.raw_dim());
    let mut dt_proj = Array2::zeros(t_raw.raw_dim());
    let mut total = T::zero();
    for i in 0..positions {
        let (u, u_norm) = l2_normalize(s_raw.row(i))?;
        let (w, w_norm) = l2_normalize(t_raw.row(i))?;
        let z_pos = u.dot(&w) * inv_temp;
        // -log h(z) = ln(1 + c e^-z); its derivative is h - 1.
        total = total + (n_over_m * (-z_pos).exp()).ln_1p();
        let mut du = Array1::zeros(u.len());
        if want_grad {
            let g = (crd_critic(z_pos, n_over_m) - T::one()) * inv_temp;
            du.scaled_add(g, &w);
            let dw = &u * g;
            dt_proj
                .row_mut(i)
                .assign(&l2_normalize_backward(w.view(), w_norm, dw.view()));
        }
        for &k in negatives {
            let neg = state.buffer.row(k);
            let z = u.dot(&neg) * inv_temp;
            // -log(1 - h(z)) = ln(1 + e^z / c); its derivative is h.
            total = total + (z.exp() / n_over_m).ln_1p();
            if want_grad {
                du.scaled_add(crd_critic(z, n_over_m) * inv_temp, &neg);
            }
        }
        if want_grad {
            ds_proj
                .row_mut(i)
                .assign(&l2_normalize_backward(u.view(), u_norm, du.view()));
        }
    }
    let loss = total / div;
    if !want_grad {
        return Ok((loss, None));
    }
    ds_proj.mapv_inplace(|v| v / div);
    dt_proj.mapv_inplace(|v| v / div);
    let mut proj = state.proj.zeroed();
    let d_student = state.proj.f1.backward(&student.to_owned(), &ds_proj, &mut proj.f1);
    state.proj.f2.backward(&teacher.to_owned(), &dt_proj, &mut proj.f2);
    Ok((
        loss,
        Some(CrdGrad {
            student: d_student,
            proj,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::layers::trunc_normal;
    use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};
    use crate::rng;
    use ndarray::array;

    fn state(seed: u64, ds: usize, dt: usize, dp: usize, m: usize) -> CrdState<f64> {
        let mut s = CrdState::init(&mut rng::derive(seed, &[]), ds, dt, dp, m, 0.0);
        // Larger weights keep projected norms well away from zero.
        s.proj.f1.weight = trunc_normal(&mut rng::derive(seed, &[1]), (ds, dp), 1.0);
        s.proj.f2.weight = trunc_normal(&mut rng::derive(seed, &[2]), (dt, dp), 1.0);
        s.proj.f1.bias = trunc_normal(&mut rng::derive(seed, &[3]), (1, dp), 0.3);
        s
    }

    /// Direct evaluation of the critic formula with explicit exp/log.
    fn oracle(s: &Array2<f64>, t: &Array2<f64>, negs: &[usize], st: &CrdState<f64>) -> f64 {
        let c = negs.len() as f64 / st.buffer.nrows() as f64;
        let proj = |l: &Linear<f64>, x: ndarray::ArrayView1<f64>| {
            let mut out = vec![0.0; l.d_out()];
            for (o, v) in out.iter_mut().enumerate() {
                *v = l.bias[[0, o]] + (0..l.d_in()).map(|k| x[k] * l.weight[[k, o]]).sum::<f64>();
            }
            let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.iter().map(|v| v / n).collect::<Vec<_>>()
        };
        let h = |a: &[f64], b: &[f64]| {
            let z: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            z.exp() / (z.exp() + c)
        };
        let mut total = 0.0;
        for i in 0..s.nrows() {
            let u = proj(&st.proj.f1, s.row(i));
            let w = proj(&st.proj.f2, t.row(i));
            total -= h(&u, &w).ln();
            for &k in negs {
                let b: Vec<f64> = st.buffer.row(k).to_vec();
                total -= (1.0 - h(&u, &b)).ln();
            }
        }
        total / s.nrows() as f64
    }

    #[test]
    fn critic_is_one_half_at_zero_score_with_unit_ratio() {
        assert_eq!(crd_critic(0.0, 1.0), 0.5);
    }

    #[test]
    fn two_half_critics_cost_two_ln_two() {
        // One position whose positive and single negative both score z = 0,
        // with N/M = 1/2 ... adjusted so h = 0.5 requires c = 1: use z = ln(c).
        let c: f64 = 1.0 / 2.0;
        let z = c.ln();
        let h = crd_critic(z, c);
        assert!((h - 0.5).abs() < 1e-15);
        let loss = -(h.ln()) - (1.0 - h).ln();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_are_nonnegative() {
        for z in [-1.0f64, -0.3, 0.0, 0.5, 1.0] {
            for c in [0.01, 0.5, 0.99] {
                let h = crd_critic(z, c);
                assert!(h > 0.0 && h < 1.0);
                assert!(-h.ln() >= 0.0 && -(1.0 - h).ln() >= 0.0);
            }
        }
    }

    #[test]
    fn matches_direct_formula() {
        for seed in 0..20u64 {
            let st = state(seed, 5, 4, 3, 16);
            let s = trunc_normal::<f64, _>(&mut rng::derive(seed, &[10]), (3, 5), 1.0);
            let t = trunc_normal::<f64, _>(&mut rng::derive(seed, &[11]), (3, 4), 1.0);
            let negs = draw_negatives(&mut rng::derive(seed, &[12]), 2, 4, 16).unwrap();
            let got = crd_loss(s.view(), t.view(), 2, &negs, &st, None, Reduction::Mean).unwrap();
            assert!((got - oracle(&s, &t, &negs, &st)).abs() < 1e-9);
        }
    }

    #[test]
    fn too_many_negatives_is_an_error() {
        let st = state(1, 5, 4, 3, 4);
        let s = Array2::<f64>::ones((1, 5));
        let t = Array2::<f64>::ones((1, 4));
        let err = crd_loss(s.view(), t.view(), 0, &[1, 2, 3, 0], &st, None, Reduction::Mean)
            .unwrap_err();
        assert!(err.to_string().starts_with("insufficient negatives"));
        assert!(draw_negatives(&mut rng::derive(0, &[]), 0, 4, 4).is_err());
        assert!(crd_loss(s.view(), t.view(), 1, &[1], &st, None, Reduction::Mean).is_err());
    }

    #[test]
    fn negatives_exclude_own_index() {
        for seed in 0..50 {
            let n = draw_negatives(&mut rng::derive(seed, &[]), 3, 5, 8).unwrap();
            assert_eq!(n.len(), 5);
            assert!(!n.contains(&3));
            assert!(n.iter().all(|&k| k < 8));
            let mut u = n.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 5);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let st = state(seed, 4, 3, 3, 10);
            let s = trunc_normal::<f64, _>(&mut rng::derive(seed, &[20]), (2, 4), 1.0);
            let t = trunc_normal::<f64, _>(&mut rng::derive(seed, &[21]), (2, 3), 1.0);
            let negs = [1, 5, 7];
            let (_, g) =
                crd_loss_with_grad(s.view(), t.view(), 0, &negs, &st, None, Reduction::Mean).unwrap();

            let numeric = central_difference(
                |p| {
                    let s2 = Array2::from_shape_vec((2, 4), p.to_vec()).unwrap();
                    crd_loss(s2.view(), t.view(), 0, &negs, &st, None, Reduction::Mean).unwrap()
                },
                s.as_slice().unwrap(),
                FD_STEP,
            );
            assert!(max_relative_error(g.student.as_slice().unwrap(), &numeric) < 1e-4);

            let flat: Vec<f64> = st.proj.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
            let analytic: Vec<f64> = g.proj.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
            let numeric = central_difference(
                |p| {
                    let mut st2 = st.clone();
                    let mut k = 0;
                    st2.proj.visit_mut("", &mut |_, a| {
                        for v in a.iter_mut() {
                            *v = p[k];
                            k += 1;
                        }
                    });
                    crd_loss(s.view(), t.view(), 0, &negs, &st2, None, Reduction::Mean).unwrap()
                },
                &flat,
                FD_STEP,
            );
            assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn higher_positive_score_lowers_loss() {
        // Identity projections in 3-d. The student rotates in the e1-e2 plane
        // while both negatives sit on e3, so only the positive score moves.
        let mut st = state(3, 3, 3, 3, 8);
        st.proj.f1.weight = Array2::eye(3);
        st.proj.f2.weight = Array2::eye(3);
        st.proj.f1.bias.fill(0.0);
        st.proj.f2.bias.fill(0.0);
        for k in [1, 2] {
            st.buffer.row_mut(k).assign(&array![0.0, 0.0, 1.0]);
        }
        let t = array![[1.0, 0.0, 0.0]];
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let theta = 0.99 * std::f64::consts::PI * (1.0 - k as f64 / 10.0);
            let s = array![[theta.cos(), theta.sin(), 0.0]];
            let loss = crd_loss(s.view(), t.view(), 0, &[1, 2], &st, None, Reduction::Mean).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn buffer_update_semantics() {
        let mut st = state(4, 3, 3, 4, 6);
        let t = array![0.3, -1.0, 2.0];
        st.update(2, t.view()).unwrap();
        let row = st.buffer.row(2);
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);

        let t2 = array![-1.0, 0.5, 0.1];
        st.update(2, t2.view()).unwrap();
        assert_eq!(st.buffer.row(2), st.embed_teacher(t2.view()).unwrap());

        assert!(matches!(
            st.update(6, t.view()),
            Err(Error::IndexOutOfRange { index: 6, len: 6 })
        ));

        // Momentum blend: normalize(0.5 u + 0.5 normalize(f2(v))).
        st.momentum = 0.5;
        let u = st.buffer.row(2).to_owned();
        st.update(2, t.view()).unwrap();
        let blended = &u * 0.5 + &st.embed_teacher(t.view()).unwrap() * 0.5;
        let expected = &blended / blended.dot(&blended).sqrt();
        for (a, b) in st.buffer.row(2).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_buffer_rows_are_unit() {
        let st = CrdState::<f32>::init(&mut rng::derive(9, &[]), 8, 8, 16, 32, 0.0);
        for r in st.buffer.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
    }
}
