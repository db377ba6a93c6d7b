//! Transformer building blocks. Each layer keeps what its backward pass needs
//! in an explicit cache and accumulates parameter gradients into a second
//! instance of itself.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::params::{join, Parameters};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub weight: Array2<T>,
    /// `1 x out`
    pub bias: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: trunc_normal(rng, (d_in, d_out), INIT_STD),
            bias: Array2::zeros((1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array2<T>,
    pub beta: Array2<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize, eps: f64) -> Self {
        Self {
            gamma: Array2::ones((1, d)),
            beta: Array2::zeros((1, d)),
            eps,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LnCache<T>) {
        let d = T::of(x.ncols() as f64);
        let eps = T::of(self.eps);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / d;
            *inv = T::one() / (var + eps).sqrt();
            let s = *inv;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = T::of(dy.ncols() as f64);
        let mut dx = dxhat.clone();
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let inv = cache.inv_std[i];
            row.zip_mut_with(&xh, |r, &x| *r = inv * (*r - mean_g - x * mean_gx));
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::init(rng, d, d_ff),
            down: Linear::init(rng, d_ff, d),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, FfnCache<T>) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act);
        (
            y,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &FfnCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dact = self.down.backward(&cache.act, dy, &mut grad.down);
        dact.zip_mut_with(&cache.pre, |g, &p| *g = *g * gelu_grad(p));
        self.up.backward(&cache.x, &dact, &mut grad.up)
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Multi-head self-attention over one sequence. Keys flagged invalid (padding)
/// receive exactly zero attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    context: Array2<T>,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, n_heads: usize) -> Self {
        Self {
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            output: Linear::init(rng, d, d),
            n_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.d_out() / self.n_heads
    }

    pub fn forward(&self, x: &Array2<T>, key_valid: &[bool]) -> (Array2<T>, AttnCache<T>) {
        let (n, d) = (x.nrows(), self.query.d_out());
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut context = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut p = qh.dot(&kh.t()) * scale;
            for mut row in p.rows_mut() {
                let max = row
                    .iter()
                    .zip(key_valid)
                    .filter(|(_, &ok)| ok)
                    .fold(T::neg_infinity(), |m, (&s, _)| m.max(s));
                let mut sum = T::zero();
                for (s, &ok) in row.iter_mut().zip(key_valid) {
                    *s = if ok { (*s - max).exp() } else { T::zero() };
                    sum = sum + *s;
                }
                row.mapv_inplace(|s| s / sum);
            }
            context.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }
        let y = self.output.forward(&context);
        (
            y,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub fn backward(&self, cache: &AttnCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dh = self.head_dim();
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dcontext = self.output.backward(&cache.context, dy, &mut grad.output);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dctx = dcontext.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let dp = dctx.dot(&cache.v.slice(cols).t());
            // Softmax backward: dS = P * (dP - rowsum(dP * P)).
            let mut ds = dp;
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let inner = drow.dot(&prow);
                drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - inner) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.query.backward(&cache.x, &dq, &mut grad.query);
        dx += &self.key.backward(&cache.x, &dk, &mut grad.key);
        dx += &self.value.backward(&cache.x, &dv, &mut grad.value);
        dx
    }
}

impl<T: Scalar> Parameters<T> for SelfAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Post-LN transformer block: `LN(x + Attn(x))`, then `LN(h + FFN(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attention: SelfAttention<T>,
    pub attn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub ffn_norm: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    attn: AttnCache<T>,
    ln1: LnCache<T>,
    ffn: FfnCache<T>,
    ln2: LnCache<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, n_heads: usize, d_ff: usize, eps: f64) -> Self {
        Self {
            attention: SelfAttention::init(rng, d, n_heads),
            attn_norm: LayerNorm::new(d, eps),
            ffn: FeedForward::init(rng, d, d_ff),
            ffn_norm: LayerNorm::new(d, eps),
        }
    }

    pub fn forward(&self, x: &Array2<T>, key_valid: &[bool]) -> (Array2<T>, BlockCache<T>) {
        let (a, attn) = self.attention.forward(x, key_valid);
        let (h, ln1) = self.attn_norm.forward(&(x + &a));
        let (f, ffn) = self.ffn.forward(&h);
        let (y, ln2) = self.ffn_norm.forward(&(&h + &f));
        (y, BlockCache { attn, ln1, ffn, ln2 })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dr2 = self.ffn_norm.backward(&cache.ln2, dy, &mut grad.ffn_norm);
        let mut dh = self.ffn.backward(&cache.ffn, &dr2, &mut grad.ffn);
        dh += &dr2;
        let dr1 = self.attn_norm.backward(&cache.ln1, &dh, &mut grad.attn_norm);
        let mut dx = self.attention.backward(&cache.attn, &dr1, &mut grad.attention);
        dx += &dr1;
        dx
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }
}
