use ndarray::{Array2, ArrayView2};

use super::same_shape;
use crate::error::Result;
use crate::objectives::Reduction;
use crate::scalar::Scalar;

/// `sum_i ||s_i - t_i||^2` over rows, reduced over positions.
pub fn l2_regression_loss<T: Scalar>(
    student: ArrayView2<T>,
    teacher: ArrayView2<T>,
    reduction: Reduction,
) -> Result<T> {
    same_shape(&student, &teacher)?;
    let diff = &student - &teacher;
    Ok(diff.iter().map(|&v| v * v).sum::<T>() / reduction.divisor(student.nrows().max(1)))
}

/// Loss plus gradient with respect to the student rows.
pub fn l2_regression_loss_with_grad<T: Scalar>(
    student: ArrayView2<T>,
    teacher: ArrayView2<T>,
    reduction: Reduction,
) -> Result<(T, Array2<T>)> {
    let loss = l2_regression_loss(student, teacher, reduction)?;
    let div: T = reduction.divisor(student.nrows().max(1));
    let grad = (&student - &teacher).mapv(|v| T::of(2.0) * v / div);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::layers::trunc_normal;
    use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};
    use crate::rng;

    #[test]
    fn identical_states_cost_nothing() {
        let s = trunc_normal::<f64, _>(&mut rng::derive(1, &[]), (4, 5), 1.0);
        assert_eq!(l2_regression_loss(s.view(), s.view(), Reduction::Mean).unwrap(), 0.0);
    }

    #[test]
    fn unit_offset_costs_width_per_position() {
        let t = trunc_normal::<f64, _>(&mut rng::derive(2, &[]), (3, 7), 1.0);
        let s = &t + 1.0;
        let loss = l2_regression_loss(s.view(), t.view(), Reduction::Mean).unwrap();
        assert!((loss - 7.0).abs() < 1e-12);
    }

    #[test]
    fn matches_elementwise_sum() {
        let s = trunc_normal::<f64, _>(&mut rng::derive(3, &[]), (5, 8), 1.0);
        let t = trunc_normal::<f64, _>(&mut rng::derive(4, &[]), (5, 8), 1.0);
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..8 {
                oracle += (s[[i, j]] - t[[i, j]]).powi(2);
            }
        }
        let got = l2_regression_loss(s.view(), t.view(), Reduction::Sum).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        let mean = l2_regression_loss(s.view(), t.view(), Reduction::Mean).unwrap();
        assert!((mean - oracle / 5.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((4, 4));
        assert!(l2_regression_loss(a.view(), b.view(), Reduction::Mean).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = trunc_normal::<f64, _>(&mut rng::derive(5, &[]), (3, 4), 1.0);
        let t = trunc_normal::<f64, _>(&mut rng::derive(6, &[]), (3, 4), 1.0);
        let (_, g) = l2_regression_loss_with_grad(s.view(), t.view(), Reduction::Mean).unwrap();
        let numeric = central_difference(
            |p| {
                let s2 = Array2::from_shape_vec((3, 4), p.to_vec()).unwrap();
                l2_regression_loss(s2.view(), t.view(), Reduction::Mean).unwrap()
            },
            s.as_slice().unwrap(),
            FD_STEP,
        );
        assert!(max_relative_error(g.as_slice().unwrap(), &numeric) < 1e-4);
    }
}
