use std::collections::BTreeMap;

use super::{KdConfig, KdObjective};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `mlm + sum_o w_o * L_o` over the enabled objectives. Values for disabled
/// objectives are ignored; a missing value for an enabled one is an error.
pub fn combined_student_loss<T: Scalar>(
    mlm: T,
    kd_values: &BTreeMap<KdObjective, T>,
    cfg: &KdConfig,
) -> Result<T> {
    let mut total = mlm;
    for &o in &cfg.objectives {
        let v = kd_values.get(&o).ok_or_else(|| {
            Error::InvalidArgument(format!("no value supplied for enabled objective {}", o.name()))
        })?;
        total += T::of(cfg.weight(o)) * *v;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn values(pairs: &[(KdObjective, f64)]) -> BTreeMap<KdObjective, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn default_is_mlm_plus_nst_plus_crd() {
        let cfg = KdConfig::default();
        let v = values(&[(KdObjective::Nst, 2.0), (KdObjective::Crd, 3.0), (KdObjective::L2Regression, 50.0)]);
        assert_eq!(combined_student_loss(1.0, &v, &cfg).unwrap(), 6.0);
    }

    #[test]
    fn weighted_single_objective() {
        let mut cfg = KdConfig::with_objectives(&[KdObjective::Nst]);
        cfg.weights.insert(KdObjective::Nst, 0.5);
        let v = values(&[(KdObjective::Nst, 4.0)]);
        assert_eq!(combined_student_loss(1.0, &v, &cfg).unwrap(), 3.0);
    }

    #[test]
    fn empty_set_is_mlm_alone() {
        let cfg = KdConfig::with_objectives(&[]);
        assert_eq!(combined_student_loss(1.25, &BTreeMap::new(), &cfg).unwrap(), 1.25);
    }

    #[test]
    fn missing_enabled_value_is_an_error() {
        let cfg = KdConfig::default();
        let v = values(&[(KdObjective::Nst, 2.0)]);
        assert!(combined_student_loss(1.0, &v, &cfg).is_err());
    }
}
