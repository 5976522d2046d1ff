//! Encoder-only patch transformer: patch tokenization, input projection,
//! pre-norm rotary multi-head attention blocks, mask-token substitution and
//! the output projection back to patch values.
//!
//! Graph-level functions operate on a batch of `B` samples with `N` tokens
//! each, stored as `B * N` rows in sample-major order (`row = b * N + t`).

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, Rng, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub patch: usize,
    pub ffn_mult: usize,
    pub eps: f64,
    pub rope_base: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d: 64,
            heads: 4,
            patch: 16,
            ffn_mult: 4,
            eps: 1e-5,
            rope_base: 10_000.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head width {} must be even for rotary embeddings",
                self.d / self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be at least 1".into()));
        }
        if !(self.eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Config("eps must be positive and rope_base > 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }

    /// Token counts `(context, horizon)` for the given lengths.
    pub fn token_counts(&self, context_len: usize, horizon_len: usize) -> (usize, usize) {
        (
            context_len.div_ceil(self.patch),
            horizon_len.div_ceil(self.patch),
        )
    }
}

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Names of the attention projections of `layer`, in Q, K, V, O order.
pub fn attention_params(layer: usize) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|w| layer_param(layer, &format!("attn.{w}")))
}

/// Randomly initialized backbone parameters.
pub fn init_backbone<T: Scalar>(cfg: &BackboneConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (p, d, f) = (cfg.patch, cfg.d, cfg.ffn_dim());
    let std_in = 1.0 / (p as f64).sqrt();
    let std_d = 1.0 / (d as f64).sqrt();
    let std_f = 1.0 / (f as f64).sqrt();
    let depth = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    let mut s = ParamStore::new();
    s.insert("in_proj.weight", rng.normal_tensor(vec![p, d], std_in))?;
    s.insert("in_proj.bias", Tensor::zeros(vec![d]))?;
    s.insert("mask_token", rng.normal_tensor(vec![d], 0.02))?;
    for l in 0..cfg.layers {
        s.insert(layer_param(l, "norm1.gamma"), Tensor::ones(vec![d]))?;
        s.insert(layer_param(l, "norm1.beta"), Tensor::zeros(vec![d]))?;
        let [wq, wk, wv, wo] = attention_params(l);
        s.insert(wq, rng.normal_tensor(vec![d, d], std_d))?;
        s.insert(wk, rng.normal_tensor(vec![d, d], std_d))?;
        s.insert(wv, rng.normal_tensor(vec![d, d], std_d))?;
        s.insert(wo, rng.normal_tensor(vec![d, d], std_d * depth))?;
        s.insert(layer_param(l, "norm2.gamma"), Tensor::ones(vec![d]))?;
        s.insert(layer_param(l, "norm2.beta"), Tensor::zeros(vec![d]))?;
        s.insert(layer_param(l, "ffn.w1"), rng.normal_tensor(vec![d, f], std_d))?;
        s.insert(layer_param(l, "ffn.b1"), Tensor::zeros(vec![f]))?;
        s.insert(layer_param(l, "ffn.w2"), rng.normal_tensor(vec![f, d], std_f * depth))?;
        s.insert(layer_param(l, "ffn.b2"), Tensor::zeros(vec![d]))?;
    }
    s.insert("final_norm.gamma", Tensor::ones(vec![d]))?;
    s.insert("final_norm.beta", Tensor::zeros(vec![d]))?;
    s.insert("out_proj.weight", rng.normal_tensor(vec![d, p], std_d))?;
    s.insert("out_proj.bias", Tensor::zeros(vec![p]))?;
    Ok(s)
}

/// A context split into patch tokens followed by horizon placeholder tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<T> {
    /// `[N, P]`; horizon rows are zero placeholders.
    pub tokens: Tensor<T>,
    pub n_context: usize,
    pub n_horizon: usize,
    /// Steps prepended to the first context token.
    pub context_pad: usize,
    /// Steps of the last horizon token past the end of the horizon.
    pub horizon_pad: usize,
    pub horizon_len: usize,
    /// Value used for the context pre-pad (the first context value).
    pub pad_value: T,
}

impl<T> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.n_context + self.n_horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon_span(&self) -> Range<usize> {
        self.n_context..self.n_context + self.n_horizon
    }
}

/// Right-aligns the context into `⌈C/P⌉` tokens, pre-padding the first token
/// with the first context value, and appends `⌈H/P⌉` placeholder tokens.
pub fn patchify<T: Scalar>(context: &[T], horizon_len: usize, p: usize) -> Result<PatchSequence<T>> {
    if p == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    if context.is_empty() || horizon_len == 0 {
        return Err(Error::Contract("context and horizon must be non-empty".into()));
    }
    let n_context = context.len().div_ceil(p);
    let n_horizon = horizon_len.div_ceil(p);
    let context_pad = n_context * p - context.len();
    let pad_value = context[0];
    let mut data = Vec::with_capacity((n_context + n_horizon) * p);
    data.extend(std::iter::repeat(pad_value).take(context_pad));
    data.extend_from_slice(context);
    data.resize((n_context + n_horizon) * p, T::zero());
    Ok(PatchSequence {
        tokens: Tensor::new(vec![n_context + n_horizon, p], data)?,
        n_context,
        n_horizon,
        context_pad,
        horizon_pad: n_horizon * p - horizon_len,
        horizon_len,
        pad_value,
    })
}

/// Rotary frequency table. Position `t` rotates pair `i` of a head by
/// `t · base^(-2i/head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeCache {
    head_dim: usize,
    base: f64,
    inv_freq: Vec<f64>,
}

impl RopeCache {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary head width must be even and positive, got {head_dim}"
            )));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            base,
            inv_freq,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Cosine and sine tables for one row per entry of `positions`.
    pub fn tables<T: Scalar>(&self, positions: &[usize]) -> (Arc<Vec<T>>, Arc<Vec<T>>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &t in positions {
            for &f in &self.inv_freq {
                let (s, c) = (t as f64 * f).sin_cos();
                cos.push(T::of(c));
                sin.push(T::of(s));
            }
        }
        (Arc::new(cos), Arc::new(sin))
    }

    /// Rotates one head vector to position `t` (outside any graph).
    pub fn rotate(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut out = x.to_vec();
        for (i, &f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (t as f64 * f).sin_cos();
            let (x0, x1) = (x[2 * i], x[2 * i + 1]);
            out[2 * i] = x0 * c - x1 * s;
            out[2 * i + 1] = x0 * s + x1 * c;
        }
        out
    }
}

/// `positions` repeated once per sample of a batch.
pub fn tile_positions(positions: &[usize], batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(positions.len() * batch);
    for _ in 0..batch {
        out.extend_from_slice(positions);
    }
    out
}

/// Graph handles of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LayerWeights {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, layer: usize) -> Result<Self> {
        let [wq, wk, wv, wo] = attention_params(layer);
        let mut v = |name: &str| b.var(g, name);
        Ok(Self {
            norm1_gamma: v(&layer_param(layer, "norm1.gamma"))?,
            norm1_beta: v(&layer_param(layer, "norm1.beta"))?,
            wq: v(&wq)?,
            wk: v(&wk)?,
            wv: v(&wv)?,
            wo: v(&wo)?,
            norm2_gamma: v(&layer_param(layer, "norm2.gamma"))?,
            norm2_beta: v(&layer_param(layer, "norm2.beta"))?,
            w1: v(&layer_param(layer, "ffn.w1"))?,
            b1: v(&layer_param(layer, "ffn.b1"))?,
            w2: v(&layer_param(layer, "ffn.w2"))?,
            b2: v(&layer_param(layer, "ffn.b2"))?,
        })
    }
}

/// `tokens · W + b`, one row per token.
pub fn in_project<T: Scalar>(g: &mut Graph<T>, tokens: Var, w: Var, b: Var) -> Result<Var> {
    let x = g.matmul(tokens, w)?;
    g.add_bias(x, b)
}

/// Replaces (not adds) the rows `horizon` of every sample with `m`.
pub fn apply_mask_token<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    n: usize,
    horizon: Range<usize>,
    m: Var,
) -> Result<Var> {
    if horizon.is_empty() || horizon.end > n {
        return Err(Error::Contract(format!(
            "horizon span {horizon:?} must be non-empty and inside {n} tokens"
        )));
    }
    let rows = g.shape(h)[0];
    if n == 0 || rows % n != 0 {
        return Err(Error::Dimension {
            op: "apply_mask_token",
            lhs: g.shape(h).to_vec(),
            rhs: vec![n],
        });
    }
    let d = g.shape(h)[1];
    let m_row = g.reshape(m, vec![1, d])?;
    let stacked = g.concat(&[h, m_row], 0)?;
    let index = (0..rows)
        .map(|r| if horizon.contains(&(r % n)) { rows } else { r })
        .collect();
    g.gather_rows(stacked, Arc::new(index))
}

/// `[B*n, heads*dh] -> [heads*B, n, dh]`, optionally rotating every row.
pub fn to_heads<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    heads: usize,
    batch: usize,
    rope: Option<(&Arc<Vec<T>>, &Arc<Vec<T>>)>,
) -> Result<Var> {
    let rows = g.shape(x)[0];
    let d = g.shape(x)[1];
    let n = rows / batch;
    let mut y = g.split_heads(x, heads)?;
    if let Some((cos, sin)) = rope {
        y = g.rope(y, Arc::clone(cos), Arc::clone(sin))?;
    }
    g.reshape(y, vec![heads * batch, n, d / heads])
}

/// Inverse of [`to_heads`] (without rotation).
pub fn from_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize, batch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let y = g.reshape(x, vec![heads, batch * s[1], s[2]])?;
    g.merge_heads(y)
}

/// Attention probabilities `softmax(q kᵀ / √dh)` for `[heads*B, n, dh]`
/// inputs, with `scores` blocks optionally supplied by the caller.
pub fn attention_probs<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let dh = g.shape(q)[2];
    let kt = g.transpose(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    g.masked_softmax(scores, mask)
}

/// Per-block geometry shared by every layer of a forward pass.
#[derive(Debug, Clone)]
pub struct BlockContext<'a, T> {
    pub heads: usize,
    pub batch: usize,
    pub eps: T,
    /// Rotary tables for all `B * n` rows.
    pub cos: Arc<Vec<T>>,
    pub sin: Arc<Vec<T>>,
    pub mask: Option<&'a AttentionMask>,
}

/// Pre-norm FFN sub-layer with residual: `h + W2·gelu(W1·LN(h) + b1) + b2`.
pub fn ffn_residual<T: Scalar>(g: &mut Graph<T>, w: &LayerWeights, h: Var, eps: T) -> Result<Var> {
    let y = g.layer_norm(h, w.norm2_gamma, w.norm2_beta, eps)?;
    let y = g.matmul(y, w.w1)?;
    let y = g.add_bias(y, w.b1)?;
    let y = g.gelu(y)?;
    let y = g.matmul(y, w.w2)?;
    let y = g.add_bias(y, w.b2)?;
    g.add(h, y)
}

/// One pre-norm transformer block. The attention probabilities
/// (`[heads*B, n, n]`) are appended to `capture` when given.
pub fn attn_block<T: Scalar>(
    g: &mut Graph<T>,
    w: &LayerWeights,
    h: Var,
    ctx: &BlockContext<'_, T>,
    capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let x = g.layer_norm(h, w.norm1_gamma, w.norm1_beta, ctx.eps)?;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let rope = Some((&ctx.cos, &ctx.sin));
    let qh = to_heads(g, q, ctx.heads, ctx.batch, rope)?;
    let kh = to_heads(g, k, ctx.heads, ctx.batch, rope)?;
    let vh = to_heads(g, v, ctx.heads, ctx.batch, None)?;
    let p = attention_probs(g, qh, kh, ctx.mask)?;
    if let Some(c) = capture {
        c.push(g.value(p).clone());
    }
    let o = g.batch_matmul(p, vh)?;
    let o = from_heads(g, o, ctx.heads, ctx.batch)?;
    let o = g.matmul(o, w.wo)?;
    let h = g.add(h, o)?;
    ffn_residual(g, w, h, ctx.eps)
}

/// Maps the `horizon` rows of every sample to patch values and returns the
/// first `horizon_len` steps per sample as `[B, horizon_len]`.
pub fn out_project<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    n: usize,
    horizon: Range<usize>,
    horizon_len: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    if horizon.is_empty() || horizon.end > n {
        return Err(Error::Contract(format!(
            "horizon span {horizon:?} must be non-empty and inside {n} tokens"
        )));
    }
    let rows = g.shape(h)[0];
    let batch = rows / n;
    let p = g.shape(w)[1];
    let nh = horizon.len();
    if horizon_len > nh * p {
        return Err(Error::Contract(format!(
            "{nh} horizon tokens of {p} steps cannot hold {horizon_len} steps"
        )));
    }
    let index = (0..batch)
        .flat_map(|bi| horizon.clone().map(move |t| bi * n + t))
        .collect();
    let hz = g.gather_rows(h, Arc::new(index))?;
    let y = g.matmul(hz, w)?;
    let y = g.add_bias(y, b)?;
    let y = g.reshape(y, vec![batch, nh * p])?;
    g.slice(y, 1, 0, horizon_len)
}

/// Mean squared error between `pred` and a constant `target` of equal shape.
pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    let t = g.constant(target);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Mean squared error over the steps where `keep` is true.
pub fn reconstruction_loss<T: Scalar>(pred: &[T], target: &[T], keep: Option<&[bool]>) -> Result<f64> {
    if pred.len() != target.len() || keep.is_some_and(|k| k.len() != pred.len()) {
        return Err(Error::Contract(format!(
            "prediction has {} steps, target {}",
            pred.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        if keep.map_or(true, |k| k[i]) {
            let e = p.as_f64() - t.as_f64();
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("every target step is padding".into()));
    }
    Ok(sum / count as f64)
}

/// Stacks the patch tokens of equally shaped sequences into `[B*N, P]`.
pub fn stack_tokens<T: Scalar>(seqs: &[PatchSequence<T>]) -> Result<Tensor<T>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let shape = first.tokens.shape().to_vec();
    let mut data = Vec::with_capacity(seqs.len() * first.tokens.len());
    for s in seqs {
        if s.tokens.shape() != shape.as_slice() {
            return Err(Error::Dimension {
                op: "stack_tokens",
                lhs: shape,
                rhs: s.tokens.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.tokens.data());
    }
    Tensor::new(vec![seqs.len() * shape[0], shape[1]], data)
}

/// Values produced by a backbone forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `[B, H]` forecast.
    pub pred: Var,
    /// `[B*N, d]` output of the last block (before the final norm).
    pub hidden: Var,
    pub n_context: usize,
    pub n_tokens: usize,
}

/// Backbone applied to a batch of equally long contexts.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    cfg: &BackboneConfig,
    contexts: &[&[T]],
    horizon_len: usize,
    mut capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<BackboneOutput> {
    cfg.validate()?;
    let seqs = contexts
        .iter()
        .map(|c| patchify(c, horizon_len, cfg.patch))
        .collect::<Result<Vec<_>>>()?;
    let tokens = stack_tokens(&seqs)?;
    let (nc, n) = (seqs[0].n_context, seqs[0].len());
    let batch = contexts.len();

    let x = g.constant(tokens);
    let w_in = b.var(g, "in_proj.weight")?;
    let b_in = b.var(g, "in_proj.bias")?;
    let m = b.var(g, "mask_token")?;
    let h = in_project(g, x, w_in, b_in)?;
    let mut h = apply_mask_token(g, h, n, nc..n, m)?;

    let rope = RopeCache::new(cfg.head_dim(), cfg.rope_base)?;
    let positions: Vec<usize> = (0..n).collect();
    let (cos, sin) = rope.tables(&tile_positions(&positions, batch));
    let ctx = BlockContext {
        heads: cfg.heads,
        batch,
        eps: T::of(cfg.eps),
        cos,
        sin,
        mask: None,
    };
    for l in 0..cfg.layers {
        let w = LayerWeights::bind(g, b, l)?;
        h = attn_block(g, &w, h, &ctx, capture.as_deref_mut())?;
    }
    let gamma = b.var(g, "final_norm.gamma")?;
    let beta = b.var(g, "final_norm.beta")?;
    let hn = g.layer_norm(h, gamma, beta, ctx.eps)?;
    let w_out = b.var(g, "out_proj.weight")?;
    let b_out = b.var(g, "out_proj.bias")?;
    let pred = out_project(g, hn, n, nc..n, horizon_len, w_out, b_out)?;
    Ok(BackboneOutput {
        pred,
        hidden: h,
        n_context: nc,
        n_tokens: n,
    })
}

/// Zero-shot forecasts `[B, H]` of a parameter store, outside any training.
pub fn backbone_predict<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &BackboneConfig,
    contexts: &[&[T]],
    horizon_len: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let out = backbone_forward(&mut g, &mut b, cfg, contexts, horizon_len, None)?;
    Ok(g.value(out.pred).clone())
}
