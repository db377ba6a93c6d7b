//! Named-parameter traversal. Gradient buffers and optimizer moments are
//! stored in instances of the same struct as the model, so every traversal
//! visits tensors in one fixed order and names line up across all of them.

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>));

    fn named(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, a| out.push((n, a)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, a| out.push((n, a)));
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, a| a.fill(T::zero()));
        z
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            *dst += s;
        }
    }

    fn scale(&mut self, factor: T) {
        self.visit_mut("", &mut |_, a| a.mapv_inplace(|v| v * factor));
    }

    fn sq_norm(&self) -> T {
        self.named()
            .iter()
            .map(|(_, a)| a.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    /// SHA-256 over parameter names and their `f32` little-endian bytes.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in self.named() {
            h.update(name.as_bytes());
            for &v in a.iter() {
                h.update(v.to_f32_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}
