//! Central finite differences, used to check every hand-derived backward pass.

mod suite;

pub use suite::{loss_gradcheck_suite, GradcheckReport, GRADCHECK_INSTANCES};

/// Step used for all central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, REL_ERR_FLOOR)
}

/// As [`max_relative_error`] with a caller-chosen floor, for probes whose
/// magnitude makes roundoff in the difference quotient exceed `REL_ERR_FLOOR`.
pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = central_difference(f, &[1.0, 2.0], FD_STEP);
        assert!(max_relative_error(&g, &[8.0, 3.0]) < 1e-8);
    }

    #[test]
    fn floor_prevents_blowup_on_zero_gradients() {
        assert!(max_relative_error(&[0.0], &[1e-12]) < 1e-5);
        assert!(max_relative_error(&[1.0], &[1.1]) > 0.05);
    }
}
