use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::config::EncoderConfig;
use super::layers::{trunc_normal, Block, BlockCache, LayerNorm, Linear, LnCache, INIT_STD};
use crate::corpus::{MaskedSequence, TokenSequence, VideoFeatures};
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;

/// Anything that carries token ids plus a padding mask.
pub trait TokenInput {
    fn token_ids(&self) -> &[u32];
    fn pad_mask(&self) -> &[bool];
}

impl TokenInput for TokenSequence {
    fn token_ids(&self) -> &[u32] {
        &self.ids
    }

    fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }
}

impl TokenInput for MaskedSequence {
    fn token_ids(&self) -> &[u32] {
        &self.ids
    }

    fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }
}

/// Encoder activations plus which rows are content (not `[CLS]`, not padding).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T> {
    pub states: Array2<T>,
    pub content: Vec<bool>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn num_content(&self) -> usize {
        self.content.iter().filter(|&&c| c).count()
    }

    pub fn content_states(&self) -> Array2<T> {
        crate::ops::select_rows(self.states.view(), &self.content)
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

/// Temporal mean of frame states.
pub fn pool_video<T: Scalar>(h: &HiddenStates<T>) -> Result<Array1<T>> {
    if h.states.nrows() == 0 {
        return Err(Error::Empty("video has no frames"));
    }
    Ok(h.states.mean_axis(Axis(0)).expect("non-empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputLayer<T> {
    /// `|Z| x d` token embedding table.
    Tokens(Array2<T>),
    /// Learned projection of frame features into the hidden width.
    Frames(Linear<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmHead<T> {
    /// Untied `d x |Z|` projection; `None` reuses the token embeddings.
    pub weight: Option<Array2<T>>,
    pub bias: Array2<T>,
}

/// `W2 relu(W1 h + b1) + b2`, applied per position.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillHead<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct DistillCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> DistillHead<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            hidden: Linear::init(rng, d_in, d_in),
            output: Linear::init(rng, d_in, d_out),
        }
    }

    pub fn forward(&self, h: &Array2<T>) -> (Array2<T>, DistillCache<T>) {
        let pre = self.hidden.forward(h);
        let act = pre.mapv(|v| v.max(T::zero()));
        let y = self.output.forward(&act);
        (
            y,
            DistillCache {
                x: h.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &DistillCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dact = self.output.backward(&cache.act, dy, &mut grad.output);
        dact.zip_mut_with(&cache.pre, |g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        self.hidden.backward(&cache.x, &dact, &mut grad.hidden)
    }
}

impl<T: Scalar> Parameters<T> for DistillHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Debug, Clone)]
enum InputCache<T> {
    Tokens(Vec<u32>),
    Frames(Array2<T>),
}

/// Everything [`EncoderModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    input: InputCache<T>,
    embed: LnCache<T>,
    blocks: Vec<BlockCache<T>>,
}

/// A BERT-style post-LN transformer encoder over tokens or frame features,
/// with optional LM, distillation and voken heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub input: InputLayer<T>,
    /// Learned position embeddings, `max_positions x d`.
    pub positions: Array2<T>,
    pub embed_norm: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub lm_head: Option<LmHead<T>>,
    pub distill_head: Option<DistillHead<T>>,
    pub voken_head: Option<Linear<T>>,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_hidden;
        let input = match config.input_dim {
            Some(d_v) => InputLayer::Frames(Linear::init(rng, d_v, d)),
            None => InputLayer::Tokens(trunc_normal(rng, (config.vocab_size, d), INIT_STD)),
        };
        let positions = trunc_normal(rng, (config.max_positions, d), INIT_STD);
        let embed_norm = LayerNorm::new(d, config.ln_eps);
        let blocks = (0..config.n_layers)
            .map(|_| Block::init(rng, d, config.n_heads, config.d_ff, config.ln_eps))
            .collect();
        let lm_head = (config.lm_head && !config.is_video()).then(|| LmHead {
            weight: (!config.tie_lm_head).then(|| trunc_normal(rng, (d, config.vocab_size), INIT_STD)),
            bias: Array2::zeros((1, config.vocab_size)),
        });
        let distill_head = config.distill_dim.map(|out| DistillHead::init(rng, d, out));
        let voken_head = config.voken_classes.map(|k| Linear::init(rng, d, k));
        Ok(Self {
            config,
            input,
            positions,
            embed_norm,
            blocks,
            lm_head,
            distill_head,
            voken_head,
        })
    }

    pub fn d_hidden(&self) -> usize {
        self.config.d_hidden
    }

    fn run_blocks(
        &self,
        x: Array2<T>,
        key_valid: Vec<bool>,
        input: InputCache<T>,
    ) -> (Array2<T>, EncoderCache<T>) {
        let (mut h, embed) = self.embed_norm.forward(&x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, &key_valid);
            h = next;
            blocks.push(cache);
        }
        (
            h,
            EncoderCache {
                input,
                embed,
                blocks,
            },
        )
    }

    pub fn forward_tokens(
        &self,
        ids: &[u32],
        pad_mask: &[bool],
    ) -> Result<(HiddenStates<T>, EncoderCache<T>)> {
        let InputLayer::Tokens(table) = &self.input else {
            return Err(Error::InvalidArgument("frame encoder given token input".into()));
        };
        if ids.len() != pad_mask.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pad flags", ids.len()),
                got: pad_mask.len().to_string(),
            });
        }
        if ids.is_empty() || ids.len() > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.config.max_positions
            )));
        }
        let vocab = table.nrows();
        let mut x = self.positions.slice(s![..ids.len(), ..]).to_owned();
        for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfVocab {
                    id: id as usize,
                    vocab,
                });
            }
            row += &table.row(id as usize);
        }
        let key_valid: Vec<bool> = pad_mask.iter().map(|&p| !p).collect();
        let (states, cache) = self.run_blocks(x, key_valid, InputCache::Tokens(ids.to_vec()));
        let content = crate::corpus::vocab_content_mask(pad_mask);
        Ok((HiddenStates { states, content }, cache))
    }

    pub fn forward_frames(&self, frames: &Array2<T>) -> Result<(HiddenStates<T>, EncoderCache<T>)> {
        let InputLayer::Frames(proj) = &self.input else {
            return Err(Error::InvalidArgument("token encoder given frame input".into()));
        };
        if frames.ncols() != proj.d_in() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", proj.d_in()),
                got: frames.ncols().to_string(),
            });
        }
        let n = frames.nrows();
        if n == 0 || n > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "frame count {n} outside 1..={}",
                self.config.max_positions
            )));
        }
        let x = proj.forward(frames) + &self.positions.slice(s![..n, ..]);
        let (states, cache) =
            self.run_blocks(x, vec![true; n], InputCache::Frames(frames.clone()));
        Ok((
            HiddenStates {
                states,
                content: vec![true; n],
            },
            cache,
        ))
    }

    pub fn encode_text(&self, seq: &impl TokenInput) -> Result<HiddenStates<T>> {
        self.forward_tokens(seq.token_ids(), seq.pad_mask()).map(|(h, _)| h)
    }

    pub fn encode_video(&self, vf: &VideoFeatures<T>) -> Result<HiddenStates<T>> {
        self.forward_frames(&vf.frames).map(|(h, _)| h)
    }

    /// Backpropagates `d_states` (same shape as the forward output) into `grad`.
    pub fn backward(&self, cache: &EncoderCache<T>, d_states: &Array2<T>, grad: &mut Self) {
        let mut dh = d_states.clone();
        for ((block, bc), gb) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dh = block.backward(bc, &dh, gb);
        }
        let dx = self.embed_norm.backward(&cache.embed, &dh, &mut grad.embed_norm);
        let n = dx.nrows();
        {
            let mut gp = grad.positions.slice_mut(s![..n, ..]);
            gp += &dx;
        }
        match (&cache.input, &self.input, &mut grad.input) {
            (InputCache::Tokens(ids), _, InputLayer::Tokens(gtable)) => {
                for (row, &id) in dx.rows().into_iter().zip(ids) {
                    let mut g = gtable.row_mut(id as usize);
                    g += &row;
                }
            }
            (InputCache::Frames(frames), InputLayer::Frames(proj), InputLayer::Frames(gproj)) => {
                proj.backward(frames, &dx, gproj);
            }
            _ => unreachable!("cache and model input kinds agree"),
        }
    }

    /// LM logits for each row of `h`.
    pub fn lm_logits(&self, h: &Array2<T>) -> Result<Array2<T>> {
        let head = self.lm_head.as_ref().ok_or(Error::MissingHead("LM"))?;
        let logits = match (&head.weight, &self.input) {
            (Some(w), _) => h.dot(w),
            (None, InputLayer::Tokens(table)) => h.dot(&table.t()),
            (None, InputLayer::Frames(_)) => return Err(Error::MissingHead("LM")),
        };
        Ok(logits + &head.bias)
    }

    pub fn lm_backward(&self, h: &Array2<T>, dlogits: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let head = self.lm_head.as_ref().expect("lm_logits succeeded");
        let ghead = grad.lm_head.as_mut().expect("grad mirrors model");
        ghead.bias += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        match (&head.weight, &self.input) {
            (Some(w), _) => {
                *ghead.weight.as_mut().expect("grad mirrors model") += &h.t().dot(dlogits);
                dlogits.dot(&w.t())
            }
            (None, InputLayer::Tokens(table)) => {
                let InputLayer::Tokens(gtable) = &mut grad.input else {
                    unreachable!()
                };
                *gtable += &dlogits.t().dot(h);
                dlogits.dot(table)
            }
            _ => unreachable!("lm_logits succeeded"),
        }
    }

    pub fn distill(&self, h: &Array2<T>) -> Result<(Array2<T>, DistillCache<T>)> {
        let head = self.distill_head.as_ref().ok_or(Error::MissingHead("distillation"))?;
        Ok(head.forward(h))
    }

    pub fn distill_backward(&self, cache: &DistillCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let head = self.distill_head.as_ref().expect("distill succeeded");
        head.backward(cache, dy, grad.distill_head.as_mut().expect("grad mirrors model"))
    }

    pub fn voken_logits(&self, h: &Array2<T>) -> Result<Array2<T>> {
        let head = self.voken_head.as_ref().ok_or(Error::MissingHead("voken"))?;
        Ok(head.forward(h))
    }

    pub fn voken_backward(&self, h: &Array2<T>, dlogits: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let head = self.voken_head.as_ref().expect("voken_logits succeeded");
        head.backward(h, dlogits, grad.voken_head.as_mut().expect("grad mirrors model"))
    }

    /// Copies parameters into another scalar type.
    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        let conv = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64_lossy()));
        let lin = |l: &Linear<T>| Linear {
            weight: conv(&l.weight),
            bias: conv(&l.bias),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            gamma: conv(&l.gamma),
            beta: conv(&l.beta),
            eps: l.eps,
        };
        EncoderModel {
            config: self.config.clone(),
            input: match &self.input {
                InputLayer::Tokens(t) => InputLayer::Tokens(conv(t)),
                InputLayer::Frames(p) => InputLayer::Frames(lin(p)),
            },
            positions: conv(&self.positions),
            embed_norm: ln(&self.embed_norm),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attention: super::layers::SelfAttention {
                        query: lin(&b.attention.query),
                        key: lin(&b.attention.key),
                        value: lin(&b.attention.value),
                        output: lin(&b.attention.output),
                        n_heads: b.attention.n_heads,
                    },
                    attn_norm: ln(&b.attn_norm),
                    ffn: super::layers::FeedForward {
                        up: lin(&b.ffn.up),
                        down: lin(&b.ffn.down),
                    },
                    ffn_norm: ln(&b.ffn_norm),
                })
                .collect(),
            lm_head: self.lm_head.as_ref().map(|h| LmHead {
                weight: h.weight.as_ref().map(conv),
                bias: conv(&h.bias),
            }),
            distill_head: self.distill_head.as_ref().map(|h| DistillHead {
                hidden: lin(&h.hidden),
                output: lin(&h.output),
            }),
            voken_head: self.voken_head.as_ref().map(lin),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        match &self.input {
            InputLayer::Tokens(t) => f(join(prefix, "embed.tokens"), t),
            InputLayer::Frames(p) => p.visit(&join(prefix, "embed.frames"), f),
        }
        f(join(prefix, "embed.positions"), &self.positions);
        self.embed_norm.visit(&join(prefix, "embed.norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(h) = &self.lm_head {
            if let Some(w) = &h.weight {
                f(join(prefix, "lm_head.weight"), w);
            }
            f(join(prefix, "lm_head.bias"), &h.bias);
        }
        self.distill_head.visit(&join(prefix, "distill_head"), f);
        self.voken_head.visit(&join(prefix, "voken_head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Array2<T>)) {
        match &mut self.input {
            InputLayer::Tokens(t) => f(join(prefix, "embed.tokens"), t),
            InputLayer::Frames(p) => p.visit_mut(&join(prefix, "embed.frames"), f),
        }
        f(join(prefix, "embed.positions"), &mut self.positions);
        self.embed_norm.visit_mut(&join(prefix, "embed.norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        if let Some(h) = &mut self.lm_head {
            if let Some(w) = &mut h.weight {
                f(join(prefix, "lm_head.weight"), w);
            }
            f(join(prefix, "lm_head.bias"), &mut h.bias);
        }
        self.distill_head.visit_mut(&join(prefix, "distill_head"), f);
        self.voken_head.visit_mut(&join(prefix, "voken_head"), f);
    }
}
