//! Neuron selectivity transfer: squared MMD between the per-neuron activation
//! patterns (columns over positions) of student and teacher states.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `exp(-||a - b||^2 / (2 sigma^2))`.
pub fn gaussian_kernel<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>, sigma: T) -> T {
    let sq: T = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (-sq / (T::of(2.0) * sigma * sigma)).exp()
}

/// Columns of `x`, optionally scaled to unit L2 norm. All-zero columns stay
/// zero. Returns the prepared matrix and the column norms.
fn columns<T: Scalar>(x: ArrayView2<T>, normalize: bool) -> (Array2<T>, Array1<T>) {
    let norms = x.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let mut out = x.to_owned();
    if normalize {
        for (mut c, &n) in out.columns_mut().into_iter().zip(norms.iter()) {
            if n > T::zero() {
                c.mapv_inplace(|v| v / n);
            }
        }
    }
    (out, norms)
}

/// Gaussian kernel between every column of `a` and every column of `b`,
/// computed from Gram matrices.
fn kernel_matrix<T: Scalar>(a: &Array2<T>, b: &Array2<T>, sigma: T) -> Array2<T> {
    let na = a.map_axis(Axis(0), |c| c.dot(&c));
    let nb = b.map_axis(Axis(0), |c| c.dot(&c));
    let mut k = a.t().dot(b);
    let two_s2 = T::of(2.0) * sigma * sigma;
    for ((i, j), v) in k.indexed_iter_mut() {
        let sq = (na[i] + nb[j] - T::of(2.0) * *v).max(T::zero());
        *v = (-sq / two_s2).exp();
    }
    k
}

fn validate<T: Scalar>(s: &ArrayView2<T>, t: &ArrayView2<T>, sigma: T) -> Result<()> {
    if s.nrows() == 0 || t.nrows() == 0 {
        return Err(Error::Empty("NST needs at least one position"));
    }
    if s.nrows() != t.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positions", s.nrows()),
            got: t.nrows().to_string(),
        });
    }
    if s.ncols() == 0 || t.ncols() == 0 {
        return Err(Error::Empty("NST needs at least one neuron"));
    }
    if !(sigma > T::zero()) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    Ok(())
}

/// Squared MMD between the column sets of `s` (positions x d_s) and
/// `t` (positions x d_t), each term averaged over its column pairs.
pub fn nst_mmd2<T: Scalar>(s: ArrayView2<T>, t: ArrayView2<T>, sigma: T, normalize: bool) -> Result<T> {
    validate(&s, &t, sigma)?;
    let (a, _) = columns(s, normalize);
    let (b, _) = columns(t, normalize);
    Ok(mmd_terms(&a, &b, sigma).0)
}

fn mmd_terms<T: Scalar>(a: &Array2<T>, b: &Array2<T>, sigma: T) -> (T, Array2<T>, Array2<T>) {
    let ds = T::of(a.ncols() as f64);
    let dt = T::of(b.ncols() as f64);
    let kss = kernel_matrix(a, a, sigma);
    let ktt = kernel_matrix(b, b, sigma);
    let kst = kernel_matrix(a, b, sigma);
    let value = kss.sum() / (ds * ds) + ktt.sum() / (dt * dt) - T::of(2.0) * kst.sum() / (ds * dt);
    (value, kss, kst)
}

/// MMD² plus its gradient with respect to the student states `s`.
pub fn nst_mmd2_with_grad<T: Scalar>(
    s: ArrayView2<T>,
    t: ArrayView2<T>,
    sigma: T,
    normalize: bool,
) -> Result<(T, Array2<T>)> {
    validate(&s, &t, sigma)?;
    let (a, norms) = columns(s, normalize);
    let (b, _) = columns(t, normalize);
    let (value, kss, kst) = mmd_terms(&a, &b, sigma);

    let ds = T::of(a.ncols() as f64);
    let dt = T::of(b.ncols() as f64);
    let s2 = sigma * sigma;
    // d/da_i of (1/ds^2) sum k(a_i, a_i'): -(2 / (ds^2 s2)) sum_i' k_ii' (a_i - a_i')
    let r_ss = kss.sum_axis(Axis(1));
    let r_st = kst.sum_axis(Axis(1));
    let mut grad = (&a * &r_ss.view().insert_axis(Axis(0)) - a.dot(&kss)) * (-T::of(2.0) / (ds * ds * s2));
    // d/da_i of -(2/(ds dt)) sum_j k(a_i, b_j): (2 / (ds dt s2)) sum_j k_ij (a_i - b_j)
    grad += &((&a * &r_st.view().insert_axis(Axis(0)) - b.dot(&kst.t())) * (T::of(2.0) / (ds * dt * s2)));

    if normalize {
        for ((mut g, y), &n) in grad
            .columns_mut()
            .into_iter()
            .zip(a.columns())
            .zip(norms.iter())
        {
            if n > T::zero() {
                let back = crate::ops::l2_normalize_backward(y, n, g.view());
                g.assign(&back);
            } else {
                g.fill(T::zero());
            }
        }
    }
    Ok((value, grad))
}
