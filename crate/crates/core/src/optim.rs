//! AdamW with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup_steps: 0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate used for the update numbered `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Optimizer state. The moments are stored as instances of the parameter
/// struct itself, so their shapes and names mirror the model exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<P> {
    pub config: AdamWConfig,
    pub m: P,
    pub v: P,
    pub step: u64,
}

/// What one update did, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Returns the name of the first tensor holding a NaN or infinity.
pub fn first_non_finite<T: Scalar, P: Parameters<T>>(p: &P) -> Option<String> {
    p.named()
        .into_iter()
        .find(|(_, a)| a.iter().any(|v| !v.is_finite()))
        .map(|(n, _)| n)
}

impl<P> AdamW<P> {
    pub fn new<T: Scalar>(params: &P, config: AdamWConfig) -> Self
    where
        P: Parameters<T> + Clone,
    {
        Self {
            config,
            m: params.zeroed(),
            v: params.zeroed(),
            step: 0,
        }
    }

    /// Applies one update. Non-finite gradients abort before anything is
    /// modified, naming the offending tensor.
    pub fn update<T: Scalar>(&mut self, params: &mut P, grads: &P) -> Result<StepStats>
    where
        P: Parameters<T>,
    {
        if let Some(name) = first_non_finite(grads) {
            return Err(Error::NonFiniteGradient(name));
        }
        let grad_norm = grads.sq_norm().to_f64_lossy().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if grad_norm > c => T::of(c / grad_norm),
            _ => T::one(),
        };

        self.step += 1;
        let c = &self.config;
        let lr_f = c.lr_at(self.step);
        let lr = T::of(lr_f);
        let decay = T::one() - lr * T::of(c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let eps = T::of(c.eps);

        let g_all = grads.named();
        let m_all = self.m.named_mut();
        let v_all = self.v.named_mut();
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .named_mut()
            .into_iter()
            .zip(g_all)
            .zip(m_all.into_iter().zip(v_all))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *p *= decay;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(StepStats { lr: lr_f, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::layers::Linear;
    use crate::rng;
    use ndarray::array;

    fn scalar_param(p: f64) -> Linear<f64> {
        Linear {
            weight: array![[p]],
            bias: array![[0.0]],
        }
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            clip_norm: None,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = Linear::<f64>::init(&mut rng::derive(0, &[]), 3, 2);
        let before = p.clone();
        let mut opt = AdamW::new(&p, cfg(0.1, 0.0));
        let zero = p.zeroed();
        opt.update(&mut p, &zero).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut g = scalar_param(1.0);
        g.bias[[0, 0]] = 0.0;
        let mut opt = AdamW::new(&p, cfg(0.1, 0.0));
        opt.update(&mut p, &g).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.weight[[0, 0]] - expected).abs() < 1e-15);
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_step() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(&p, cfg(0.1, 0.01));
        opt.update(&mut p, &scalar_param(0.0)).unwrap();
        assert!((p.weight[[0, 0]] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_the_tensor_and_changes_nothing() {
        let mut p = Linear::<f64>::init(&mut rng::derive(1, &[]), 2, 2);
        let before = p.clone();
        let mut g = p.zeroed();
        g.bias[[0, 1]] = f64::NAN;
        let mut opt = AdamW::new(&p, cfg(0.1, 0.01));
        match opt.update(&mut p, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let p = scalar_param(0.0);
        let g = Linear {
            weight: array![[3.0]],
            bias: array![[4.0]],
        };
        let mut clipped = p.clone();
        let mut opt = AdamW::new(&p, AdamWConfig { clip_norm: Some(1.0), ..cfg(0.1, 0.0) });
        let stats = opt.update(&mut clipped, &g).unwrap();
        assert!((stats.grad_norm - 5.0).abs() < 1e-12);
        assert!((opt.m.weight[[0, 0]] - 0.1 * 0.6).abs() < 1e-12);
        assert!((opt.m.bias[[0, 0]] - 0.1 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        let c = AdamWConfig { warmup_steps: 4, ..AdamWConfig::default() };
        assert_eq!(c.lr_at(1), 0.25 * c.lr);
        assert_eq!(c.lr_at(4), c.lr);
        assert_eq!(c.lr_at(10), c.lr);
    }

    /// Reference Adam without weight decay, written out separately.
    fn adam_reference(p: &mut [f64], grads: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut m = vec![0.0; p.len()];
        let mut v = vec![0.0; p.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / (1.0 - b1.powi(t))) / ((v[i] / (1.0 - b2.powi(t))).sqrt() + eps);
            }
        }
    }

    #[test]
    fn zero_decay_reduces_to_adam() {
        let mut p = Linear::<f64>::init(&mut rng::derive(2, &[]), 2, 3);
        let mut reference: Vec<f64> = p.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
        let mut opt = AdamW::new(&p, cfg(0.05, 0.0));
        let mut all = Vec::new();
        for s in 0..5u64 {
            let g = Linear::<f64>::init(&mut rng::derive(3, &[s]), 2, 3);
            all.push(g.named().iter().flat_map(|(_, a)| a.iter().copied()).collect::<Vec<_>>());
            opt.update(&mut p, &g).unwrap();
        }
        adam_reference(&mut reference, &all, 0.05);
        let got: Vec<f64> = p.named().iter().flat_map(|(_, a)| a.iter().copied()).collect();
        for (a, b) in got.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
