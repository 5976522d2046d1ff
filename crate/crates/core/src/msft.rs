//! Multi-scale finetuning wrapper around a frozen backbone.
//!
//! Each scale of a sample is patchified on its own and embedded through the
//! frozen input projection followed by a scale adapter. The scale sequences
//! are concatenated and run through the frozen blocks, whose Q/K/V
//! projections carry per-scale low-rank deltas. Attention is restricted to
//! tokens of the same scale, and cross-scale information flows through the
//! coarse-to-fine and fine-to-coarse aggregators inserted after attention.
//! Every scale produces its own horizon forecast; losses and upsampled
//! forecasts are mixed with softmax weights.
//!
//! At initialization (identity adapters, zero LoRA `B`, zero aggregators)
//! the forecast of every scale equals the frozen backbone run on that scale
//! alone.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use crate::backbone::{
    apply_mask_token, attention_probs, ffn_residual, from_heads, in_project, layer_param, mse,
    out_project, patchify, stack_tokens, tile_positions, to_heads, BackboneConfig, LayerWeights,
    RopeCache,
};
use crate::error::{Error, Result};
use crate::multiscale::{
    avg_downsample, build_multiscale_set, upsample_prediction, AlignmentMap, PadSide,
    ScaleIndexMap, ScaleSpec,
};
use crate::numerics::{AttentionMask, Graph, Rng, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;

/// How tokens of different scales may interact inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Block-diagonal mask: each token attends only to its own scale.
    InScale,
    /// No mask; every scale keeps its own local rotary positions.
    Naive,
    /// No mask; cross-scale logits use positions mapped onto the coarser
    /// scale of each pair so that co-temporal tokens share a rotation.
    Aligned,
}

/// Whether a per-scale module exists per scale, is shared, or is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    PerScale,
    Shared,
    Frozen,
}

/// How per-scale losses and forecasts are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// `w = softmax(θ)` with learnable `θ`.
    Learned,
    /// `θ` fixed at zero: uniform weights.
    Average,
    /// One-hot on scale 0.
    ScaleZero,
}

str_enum!(AttentionMode { InScale => "in_scale", Naive => "naive", Aligned => "aligned" });
str_enum!(Sharing { PerScale => "scale", Shared => "shared", Frozen => "frozen" });
str_enum!(Mixing { Learned => "weighted", Average => "average", ScaleZero => "none" });

/// MSFT hyper-parameters and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsftConfig {
    pub k: usize,
    pub s: usize,
    /// `None` selects the default rank for the model width.
    pub lora_rank: Option<usize>,
    pub lora_alpha: f64,
    pub adapters: Sharing,
    pub lora: Sharing,
    pub c2f: bool,
    pub f2c: bool,
    pub attention: AttentionMode,
    pub mixing: Mixing,
    pub train_mask_token: bool,
}

impl Default for MsftConfig {
    fn default() -> Self {
        Self {
            k: 2,
            s: 2,
            lora_rank: None,
            lora_alpha: 32.0,
            adapters: Sharing::PerScale,
            lora: Sharing::PerScale,
            c2f: true,
            f2c: true,
            attention: AttentionMode::InScale,
            mixing: Mixing::Learned,
            train_mask_token: false,
        }
    }
}

/// LoRA rank used when none is configured: 16, reduced to 4 for models of
/// width at most 64, and never above the width.
pub fn default_msft_rank(d: usize) -> usize {
    if d <= 64 { 4.min(d) } else { 16.min(d) }
}

impl MsftConfig {
    /// The plain LoRA baseline: one scale, per-projection low-rank deltas,
    /// no adapters, no aggregators.
    pub fn lora_baseline(d: usize) -> Self {
        Self {
            k: 0,
            lora_rank: Some(16.min(d)),
            adapters: Sharing::Frozen,
            mixing: Mixing::ScaleZero,
            c2f: false,
            f2c: false,
            ..Self::default()
        }
    }

    pub fn spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::new(self.k, self.s)
    }

    pub fn rank(&self, d: usize) -> usize {
        self.lora_rank.unwrap_or_else(|| default_msft_rank(d))
    }

    pub fn num_scales(&self) -> usize {
        self.k + 1
    }

    pub fn validate(&self, bcfg: &BackboneConfig) -> Result<()> {
        self.spec()?;
        let r = self.rank(bcfg.d);
        if self.lora != Sharing::Frozen && (r == 0 || r > bcfg.d) {
            return Err(Error::Config(format!(
                "LoRA rank {r} must be in 1..={}",
                bcfg.d
            )));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        Ok(())
    }

    fn aggregators_active(&self) -> bool {
        self.k > 0 && (self.c2f || self.f2c)
    }
}

fn module_tag(sharing: Sharing, scale: usize) -> String {
    match sharing {
        Sharing::Shared => "shared".to_string(),
        _ => format!("s{scale}"),
    }
}

pub fn adapter_param(sharing: Sharing, scale: usize, part: &str) -> String {
    format!("adapter.{}.{part}", module_tag(sharing, scale))
}

/// `proj` is one of `q`, `k`, `v`; `part` is `a` or `b`.
pub fn lora_param(sharing: Sharing, layer: usize, proj: &str, scale: usize, part: &str) -> String {
    format!("lora.l{layer}.{proj}.{}.{part}", module_tag(sharing, scale))
}

/// `dir` is `c2f` (scale `i` into `i-1`) or `f2c` (scale `i` into `i+1`).
pub fn aggregator_param(layer: usize, dir: &str, scale: usize, part: &str) -> String {
    format!("agg.l{layer}.{dir}.s{scale}.{part}")
}

pub const MIX_THETA: &str = "mix.theta";

fn module_scales(sharing: Sharing, k: usize) -> Vec<usize> {
    match sharing {
        Sharing::PerScale => (0..=k).collect(),
        Sharing::Shared => vec![0],
        Sharing::Frozen => Vec::new(),
    }
}

/// Freshly initialized MSFT modules: identity adapters, LoRA with random `A`
/// and zero `B`, zero aggregators and `θ = 0`.
pub fn init_msft_params<T: Scalar>(
    bcfg: &BackboneConfig,
    mcfg: &MsftConfig,
    rng: &mut Rng,
) -> Result<ParamStore<T>> {
    mcfg.validate(bcfg)?;
    let d = bcfg.d;
    let mut s = ParamStore::new();
    for i in module_scales(mcfg.adapters, mcfg.k) {
        s.insert(adapter_param(mcfg.adapters, i, "weight"), Tensor::identity(d))?;
        s.insert(adapter_param(mcfg.adapters, i, "bias"), Tensor::zeros(vec![d]))?;
    }
    let r = mcfg.rank(d);
    for l in 0..bcfg.layers {
        for proj in ["q", "k", "v"] {
            for i in module_scales(mcfg.lora, mcfg.k) {
                let a = rng.normal_tensor(vec![d, r], 1.0 / (d as f64).sqrt());
                s.insert(lora_param(mcfg.lora, l, proj, i, "a"), a)?;
                s.insert(lora_param(mcfg.lora, l, proj, i, "b"), Tensor::zeros(vec![r, d]))?;
            }
        }
        if mcfg.k > 0 && mcfg.c2f {
            for i in 1..=mcfg.k {
                s.insert(aggregator_param(l, "c2f", i, "weight"), Tensor::zeros(vec![d, d]))?;
                s.insert(aggregator_param(l, "c2f", i, "bias"), Tensor::zeros(vec![d]))?;
            }
        }
        if mcfg.k > 0 && mcfg.f2c {
            for i in 0..mcfg.k {
                s.insert(aggregator_param(l, "f2c", i, "weight"), Tensor::zeros(vec![d, d]))?;
                s.insert(aggregator_param(l, "f2c", i, "bias"), Tensor::zeros(vec![d]))?;
            }
        }
    }
    s.insert(MIX_THETA, Tensor::zeros(vec![mcfg.k + 1]))?;
    Ok(s)
}

/// Names of the normalization parameters of a backbone.
pub fn norm_params(bcfg: &BackboneConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..bcfg.layers {
        for n in ["norm1.gamma", "norm1.beta", "norm2.gamma", "norm2.beta"] {
            out.push(layer_param(l, n));
        }
    }
    out.push("final_norm.gamma".into());
    out.push("final_norm.beta".into());
    out
}

/// Trainable names in MSFT mode: adapters, LoRA, aggregators, `θ` (learned
/// mixing only), every normalization layer and the output head, plus the
/// mask token when enabled. Everything else in `params` stays frozen.
pub fn msft_trainable<T: Scalar>(
    params: &ParamStore<T>,
    bcfg: &BackboneConfig,
    mcfg: &MsftConfig,
) -> BTreeSet<String> {
    let mut set: BTreeSet<String> = params
        .names()
        .filter(|n| n.starts_with("adapter.") || n.starts_with("lora.") || n.starts_with("agg."))
        .map(str::to_string)
        .collect();
    if mcfg.mixing == Mixing::Learned && mcfg.k > 0 {
        set.insert(MIX_THETA.to_string());
    }
    set.extend(norm_params(bcfg));
    set.insert("out_proj.weight".into());
    set.insert("out_proj.bias".into());
    if mcfg.train_mask_token {
        set.insert("mask_token".into());
    }
    set
}

/// Block-diagonal allow matrix over the concatenated token axis.
pub fn build_in_scale_mask(map: &ScaleIndexMap) -> AttentionMask {
    let n = map.total();
    let mut allow = vec![false; n * n];
    for span in map.spans() {
        let r = span.range();
        for i in r.clone() {
            for j in r.clone() {
                allow[i * n + j] = true;
            }
        }
    }
    AttentionMask::new(n, n, allow).expect("square mask")
}

/// Local positions of scale `from` tokens expressed at scale `to >= from`:
/// each token takes the index of the coarser token covering it.
pub fn aligned_positions(map: &ScaleIndexMap, align: &AlignmentMap, from: usize, to: usize) -> Vec<usize> {
    (0..map.span(from).len())
        .map(|t| align.map_to_coarser(from, to, t))
        .collect()
}

/// Token layout of a batch: per-scale counts and the row permutations
/// between sample-major order and per-scale blocks.
#[derive(Debug, Clone)]
pub struct ScaleLayout {
    pub map: ScaleIndexMap,
    pub align: Option<AlignmentMap>,
    pub batch: usize,
    /// For each scale, the sample-major rows of its tokens (`b * N_i + u` order).
    pub scale_rows: Vec<Arc<Vec<usize>>>,
    /// Sample-major row `r` is row `assemble[r]` of the scale blocks stacked
    /// in scale order.
    pub assemble: Arc<Vec<usize>>,
}

impl ScaleLayout {
    pub fn new(counts: &[(usize, usize)], s: usize, batch: usize) -> Result<Self> {
        let map = ScaleIndexMap::new(counts)?;
        let align = if counts.len() > 1 {
            Some(AlignmentMap::new(&map, s)?)
        } else {
            None
        };
        let n = map.total();
        let mut scale_rows = Vec::with_capacity(counts.len());
        let mut assemble = vec![0; batch * n];
        let mut offset = 0;
        for span in map.spans() {
            let ni = span.len();
            let mut rows = Vec::with_capacity(batch * ni);
            for b in 0..batch {
                for u in 0..ni {
                    let r = b * n + span.context.start + u;
                    rows.push(r);
                    assemble[r] = offset + b * ni + u;
                }
            }
            offset += batch * ni;
            scale_rows.push(Arc::new(rows));
        }
        Ok(Self {
            map,
            align,
            batch,
            scale_rows,
            assemble: Arc::new(assemble),
        })
    }

    pub fn num_scales(&self) -> usize {
        self.map.num_scales()
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.map.total()
    }

    /// Rows of scale `i` as a `[B*N_i, d]` block.
    pub fn split<T: Scalar>(&self, g: &mut Graph<T>, h: Var, i: usize) -> Result<Var> {
        g.gather_rows(h, Arc::clone(&self.scale_rows[i]))
    }

    /// Inverse of [`ScaleLayout::split`] over all scales.
    pub fn join<T: Scalar>(&self, g: &mut Graph<T>, blocks: &[Var]) -> Result<Var> {
        let cat = g.concat(blocks, 0)?;
        g.gather_rows(cat, Arc::clone(&self.assemble))
    }

    /// Batched Repeat from scale `i` (`[B*N_i, d]`) to scale `i-1`.
    fn repeat_index(&self, i: usize) -> Arc<Vec<usize>> {
        let pair = self.align.as_ref().expect("multi-scale layout").pair(i - 1);
        let (nf, nc) = (pair.n_fine, pair.n_coarse);
        let mut idx = Vec::with_capacity(self.batch * nf);
        for b in 0..self.batch {
            idx.extend(pair.fine_to_coarse.iter().map(|&q| b * nc + q));
        }
        Arc::new(idx)
    }

    /// Batched AvgPool groups from scale `i` to scale `i+1`.
    fn pool_groups(&self, i: usize) -> Arc<Vec<Vec<usize>>> {
        let pair = self.align.as_ref().expect("multi-scale layout").pair(i);
        let nf = pair.n_fine;
        let mut groups = Vec::with_capacity(self.batch * pair.n_coarse);
        for b in 0..self.batch {
            groups.extend(
                pair.groups
                    .iter()
                    .map(|grp| grp.iter().map(|&j| b * nf + j).collect()),
            );
        }
        Arc::new(groups)
    }
}

/// Aggregator handles of one layer; `None` where a branch is disabled.
#[derive(Debug, Clone, Default)]
pub struct AggregatorWeights {
    /// Indexed by source scale `i` (1..=K), mapping into `i-1`.
    pub c2f: Option<Vec<(Var, Var)>>,
    /// Indexed by source scale `i` (0..K), mapping into `i+1`.
    pub f2c: Option<Vec<(Var, Var)>>,
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Cross-scale aggregation of per-scale blocks `h[i]` (`[B*N_i, d]`).
///
/// The C2F branch runs `i = K..1`, adding `Repeat(φ(state_i))` to
/// `state_{i-1}`; the F2C branch runs `i = 0..K-1`, adding
/// `AvgPool(φ(state_i))` to `state_{i+1}`. Each branch starts from `h` and
/// projects its own running state, so updates propagate across several
/// scales. The result is the average of the two branch states.
pub fn cross_scale_aggregate<T: Scalar>(
    g: &mut Graph<T>,
    layout: &ScaleLayout,
    h: &[Var],
    maps: &AggregatorWeights,
) -> Result<Vec<Var>> {
    let k = h.len() - 1;
    if k == 0 || (maps.c2f.is_none() && maps.f2c.is_none()) {
        return Ok(h.to_vec());
    }
    let mut c2f = h.to_vec();
    if let Some(w) = &maps.c2f {
        if w.len() != k + 1 {
            return Err(Error::Config(format!("expected {} C2F maps", k + 1)));
        }
        for i in (1..=k).rev() {
            let proj = linear(g, c2f[i], w[i]).map_err(|e| e.at_scale(i))?;
            let rep = g.gather_rows(proj, layout.repeat_index(i))?;
            c2f[i - 1] = g.add(c2f[i - 1], rep).map_err(|e| e.at_scale(i - 1))?;
        }
    }
    let mut f2c = h.to_vec();
    if let Some(w) = &maps.f2c {
        if w.len() != k + 1 {
            return Err(Error::Config(format!("expected {} F2C maps", k + 1)));
        }
        for i in 0..k {
            let proj = linear(g, f2c[i], w[i]).map_err(|e| e.at_scale(i))?;
            let pooled = g.group_mean_rows(proj, layout.pool_groups(i))?;
            f2c[i + 1] = g.add(f2c[i + 1], pooled).map_err(|e| e.at_scale(i + 1))?;
        }
    }
    let half = T::of(0.5);
    (0..=k)
        .map(|i| {
            let s = g.add(c2f[i], f2c[i])?;
            g.scale(s, half)
        })
        .collect()
}

/// Values of an MSFT forward pass.
#[derive(Debug, Clone)]
pub struct MsftOutput {
    /// Per-scale `[B, H_i]` forecasts.
    pub preds: Vec<Var>,
    /// `[1, K+1]` mixing weights.
    pub weights: Var,
    /// `[B*N, d]` output of the last block (before the final norm).
    pub hidden: Var,
    pub layout: ScaleLayout,
    pub horizon_lens: Vec<usize>,
}

/// Per-scale contexts of a batch, patchified.
struct ScaleInputs<T> {
    tokens: Vec<Tensor<T>>,
    counts: Vec<(usize, usize)>,
    horizon_lens: Vec<usize>,
}

fn scale_inputs<T: Scalar>(
    contexts: &[&[T]],
    horizon_len: usize,
    patch: usize,
    spec: ScaleSpec,
) -> Result<ScaleInputs<T>> {
    if contexts.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut per_scale: Vec<Vec<_>> = vec![Vec::with_capacity(contexts.len()); spec.k + 1];
    let mut horizon_lens = Vec::new();
    for c in contexts {
        let set = build_multiscale_set(c, None, horizon_len, spec)?;
        horizon_lens = set.scales.iter().map(|v| v.horizon_len).collect();
        for (i, view) in set.scales.iter().enumerate() {
            let seq = patchify(&view.context, view.horizon_len, patch).map_err(|e| e.at_scale(i))?;
            per_scale[i].push(seq);
        }
    }
    let counts = per_scale
        .iter()
        .map(|seqs| (seqs[0].n_context, seqs[0].n_horizon))
        .collect();
    let tokens = per_scale
        .iter()
        .enumerate()
        .map(|(i, seqs)| stack_tokens(seqs).map_err(|e| e.at_scale(i)))
        .collect::<Result<_>>()?;
    Ok(ScaleInputs {
        tokens,
        counts,
        horizon_lens,
    })
}

/// Per-scale low-rank delta `(α/r)·x·A·B` for rows already split by scale.
fn lora_delta<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    mcfg: &MsftConfig,
    layer: usize,
    proj: &str,
    x: Var,
    layout: &ScaleLayout,
    blocks: &[Var],
    scaling: T,
) -> Result<Option<Var>> {
    let delta_of = |g: &mut Graph<T>, b: &mut Binder<'_, T>, x: Var, scale: usize| -> Result<Var> {
        let a = b.var(g, &lora_param(mcfg.lora, layer, proj, scale, "a"))?;
        let bb = b.var(g, &lora_param(mcfg.lora, layer, proj, scale, "b"))?;
        let y = g.matmul(x, a)?;
        let y = g.matmul(y, bb)?;
        g.scale(y, scaling)
    };
    match mcfg.lora {
        Sharing::Frozen => Ok(None),
        Sharing::Shared => Ok(Some(delta_of(g, b, x, 0)?)),
        Sharing::PerScale => {
            let mut out = Vec::with_capacity(blocks.len());
            for (i, &xi) in blocks.iter().enumerate() {
                out.push(delta_of(g, b, xi, i).map_err(|e| e.at_scale(i))?);
            }
            Ok(Some(layout.join(g, &out)?))
        }
    }
}

/// Scores for the aligned-position variant, assembled block by block.
fn aligned_probs<T: Scalar>(
    g: &mut Graph<T>,
    layout: &ScaleLayout,
    rope: &RopeCache,
    heads: usize,
    q: Var,
    k: Var,
) -> Result<Var> {
    let kk = layout.num_scales();
    let align = layout.align.as_ref();
    let batch = layout.batch;
    let mut qs = Vec::with_capacity(kk);
    let mut ks = Vec::with_capacity(kk);
    for i in 0..kk {
        qs.push(layout.split(g, q, i)?);
        ks.push(layout.split(g, k, i)?);
    }
    let mut rows = Vec::with_capacity(kk);
    for a in 0..kk {
        let mut cols = Vec::with_capacity(kk);
        for bscale in 0..kk {
            let c = a.max(bscale);
            let pos_a = match align {
                Some(al) => aligned_positions(&layout.map, al, a, c),
                None => (0..layout.map.span(a).len()).collect(),
            };
            let pos_b = match align {
                Some(al) => aligned_positions(&layout.map, al, bscale, c),
                None => (0..layout.map.span(bscale).len()).collect(),
            };
            let (qc, qsn) = rope.tables::<T>(&tile_positions(&pos_a, batch));
            let (kc, ksn) = rope.tables::<T>(&tile_positions(&pos_b, batch));
            let qh = to_heads(g, qs[a], heads, batch, Some((&qc, &qsn)))?;
            let kh = to_heads(g, ks[bscale], heads, batch, Some((&kc, &ksn)))?;
            let kt = g.transpose(kh)?;
            cols.push(g.batch_matmul(qh, kt)?);
        }
        rows.push(g.concat(&cols, 2)?);
    }
    let scores = g.concat(&rows, 1)?;
    let dh = rope.head_dim();
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    g.masked_softmax(scores, None)
}

/// Full multi-scale forward pass over a batch of equally long contexts.
/// Attention probabilities of every layer (`[heads*B, N, N]`) are appended
/// to `capture` when given.
pub fn msft_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    bcfg: &BackboneConfig,
    mcfg: &MsftConfig,
    contexts: &[&[T]],
    horizon_len: usize,
    mut capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<MsftOutput> {
    bcfg.validate()?;
    mcfg.validate(bcfg)?;
    let spec = mcfg.spec()?;
    let batch = contexts.len();
    let inputs = scale_inputs(contexts, horizon_len, bcfg.patch, spec)?;
    let layout = ScaleLayout::new(&inputs.counts, mcfg.s, batch)?;
    let kk = layout.num_scales();
    let n = layout.tokens_per_sample();
    let eps = T::of(bcfg.eps);

    // Embedding: frozen projection, scale adapter, mask token.
    let w_in = b.var(g, "in_proj.weight")?;
    let b_in = b.var(g, "in_proj.bias")?;
    let m = b.var(g, "mask_token")?;
    let mut blocks = Vec::with_capacity(kk);
    for (i, tokens) in inputs.tokens.iter().enumerate() {
        let embed = |g: &mut Graph<T>, b: &mut Binder<'_, T>| -> Result<Var> {
            let x = g.constant(tokens.clone());
            let mut e = in_project(g, x, w_in, b_in)?;
            if mcfg.adapters != Sharing::Frozen {
                let aw = b.var(g, &adapter_param(mcfg.adapters, i, "weight"))?;
                let ab = b.var(g, &adapter_param(mcfg.adapters, i, "bias"))?;
                e = linear(g, e, (aw, ab))?;
            }
            let (nc, nh) = inputs.counts[i];
            apply_mask_token(g, e, nc + nh, nc..nc + nh, m)
        };
        blocks.push(embed(g, b).map_err(|e| e.at_scale(i))?);
    }
    let mut h = layout.join(g, &blocks)?;

    // Attention geometry shared by all layers.
    let rope = RopeCache::new(bcfg.head_dim(), bcfg.rope_base)?;
    let local: Vec<usize> = layout
        .map
        .spans()
        .iter()
        .flat_map(|s| 0..s.len())
        .collect();
    let (cos, sin) = rope.tables::<T>(&tile_positions(&local, batch));
    let in_scale_mask = build_in_scale_mask(&layout.map);
    let mask = match mcfg.attention {
        AttentionMode::InScale => Some(&in_scale_mask),
        _ => None,
    };
    let scaling = T::of(mcfg.lora_alpha / mcfg.rank(bcfg.d) as f64);

    for l in 0..bcfg.layers {
        let w = LayerWeights::bind(g, b, l)?;
        let x = g.layer_norm(h, w.norm1_gamma, w.norm1_beta, eps)?;
        let x_blocks = if mcfg.lora == Sharing::PerScale {
            (0..kk).map(|i| layout.split(g, x, i)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut qkv = Vec::with_capacity(3);
        for (proj, wp) in [("q", w.wq), ("k", w.wk), ("v", w.wv)] {
            let base = g.matmul(x, wp)?;
            qkv.push(match lora_delta(g, b, mcfg, l, proj, x, &layout, &x_blocks, scaling)? {
                Some(delta) => g.add(base, delta)?,
                None => base,
            });
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);

        let p = match mcfg.attention {
            AttentionMode::Aligned => aligned_probs(g, &layout, &rope, bcfg.heads, q, k)?,
            _ => {
                let qh = to_heads(g, q, bcfg.heads, batch, Some((&cos, &sin)))?;
                let kh = to_heads(g, k, bcfg.heads, batch, Some((&cos, &sin)))?;
                attention_probs(g, qh, kh, mask)?
            }
        };
        if let Some(c) = capture.as_deref_mut() {
            c.push(g.value(p).clone());
        }
        let vh = to_heads(g, v, bcfg.heads, batch, None)?;
        let o = g.batch_matmul(p, vh)?;
        let mut o = from_heads(g, o, bcfg.heads, batch)?;

        if mcfg.aggregators_active() {
            let maps = bind_aggregators(g, b, mcfg, l)?;
            let parts = (0..kk).map(|i| layout.split(g, o, i)).collect::<Result<Vec<_>>>()?;
            let merged = cross_scale_aggregate(g, &layout, &parts, &maps)?;
            o = layout.join(g, &merged)?;
        }

        let o = g.matmul(o, w.wo)?;
        let h1 = g.add(h, o)?;
        h = ffn_residual(g, &w, h1, eps)?;
    }

    let gamma = b.var(g, "final_norm.gamma")?;
    let beta = b.var(g, "final_norm.beta")?;
    let hn = g.layer_norm(h, gamma, beta, eps)?;
    let w_out = b.var(g, "out_proj.weight")?;
    let b_out = b.var(g, "out_proj.bias")?;
    let mut preds = Vec::with_capacity(kk);
    for (i, span) in layout.map.spans().iter().enumerate() {
        let y = out_project(g, hn, n, span.horizon.clone(), inputs.horizon_lens[i], w_out, b_out)
            .map_err(|e| e.at_scale(i))?;
        preds.push(y);
    }
    let weights = mixing_weights(g, b, mcfg)?;
    Ok(MsftOutput {
        preds,
        weights,
        hidden: h,
        layout,
        horizon_lens: inputs.horizon_lens,
    })
}

fn bind_aggregators<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    mcfg: &MsftConfig,
    layer: usize,
) -> Result<AggregatorWeights> {
    let k = mcfg.k;
    let mut bind = |dir: &str, scales: Range<usize>| -> Result<Vec<(Var, Var)>> {
        let placeholder = g.constant(Tensor::zeros(vec![1]));
        let mut out = vec![(placeholder, placeholder); k + 1];
        for i in scales {
            out[i] = (
                b.var(g, &aggregator_param(layer, dir, i, "weight"))?,
                b.var(g, &aggregator_param(layer, dir, i, "bias"))?,
            );
        }
        Ok(out)
    };
    Ok(AggregatorWeights {
        c2f: if mcfg.c2f { Some(bind("c2f", 1..k + 1)?) } else { None },
        f2c: if mcfg.f2c { Some(bind("f2c", 0..k)?) } else { None },
    })
}

/// `[1, K+1]` mixing weights for the configured mixing rule.
pub fn mixing_weights<T: Scalar>(g: &mut Graph<T>, b: &mut Binder<'_, T>, mcfg: &MsftConfig) -> Result<Var> {
    let kk = mcfg.k + 1;
    let theta = match mcfg.mixing {
        Mixing::Learned => b.var(g, MIX_THETA)?,
        Mixing::Average => g.constant(Tensor::zeros(vec![kk])),
        Mixing::ScaleZero => {
            let mut w = vec![T::zero(); kk];
            w[0] = T::one();
            return Ok(g.constant(Tensor::new(vec![1, kk], w)?));
        }
    };
    if g.shape(theta) != [kk] {
        return Err(Error::Dimension {
            op: "mixing weights",
            lhs: g.shape(theta).to_vec(),
            rhs: vec![kk],
        });
    }
    let row = g.reshape(theta, vec![1, kk])?;
    g.masked_softmax(row, None)
}

/// Per-scale targets `Y_i` (`[B, H_i]`) from full-resolution horizons by
/// chained post-padded pooling.
pub fn scale_targets<T: Scalar>(horizons: &[&[T]], spec: ScaleSpec) -> Result<Vec<Tensor<T>>> {
    let b = horizons.len();
    let mut cur: Vec<Vec<T>> = horizons.iter().map(|h| h.to_vec()).collect();
    let mut out = Vec::with_capacity(spec.k + 1);
    for i in 0..=spec.k {
        if i > 0 {
            cur = cur
                .iter()
                .map(|h| avg_downsample(h, spec.s, PadSide::Post))
                .collect::<Result<_>>()?;
        }
        let len = cur[0].len();
        let data = cur.iter().flat_map(|h| h.iter().copied()).collect();
        out.push(Tensor::new(vec![b, len], data).map_err(|e| e.at_scale(i))?);
    }
    Ok(out)
}

/// `Σ_i w_i · MSE(pred_i, target_i)`.
pub fn msft_loss<T: Scalar>(g: &mut Graph<T>, preds: &[Var], targets: &[Tensor<T>], weights: Var) -> Result<Var> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} scale forecasts but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (i, (&p, t)) in preds.iter().zip(targets).enumerate() {
        if g.shape(p) != t.shape() {
            return Err(Error::Contract(format!(
                "scale {i}: forecast shape {:?} vs target shape {:?}",
                g.shape(p),
                t.shape()
            )));
        }
        let l = mse(g, p, t.clone())?;
        let wi = g.slice(weights, 1, i, i + 1)?;
        let wi = g.reshape(wi, vec![1])?;
        let term = g.mul(wi, l)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Per-scale forecasts, their mixing weights and the mixed forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle<T> {
    /// `[B, H_i]` per scale.
    pub per_scale: Vec<Tensor<T>>,
    pub weights: Vec<T>,
    /// `[B, H]`: `Σ_i w_i · upsample(per_scale[i])`.
    pub mixed: Tensor<T>,
}

/// Mixes per-scale forecasts into the original resolution.
pub fn msft_predict<T: Scalar>(per_scale: Vec<Tensor<T>>, weights: Vec<T>, s: usize, h: usize) -> Result<ForecastBundle<T>> {
    if per_scale.len() != weights.len() || per_scale.is_empty() {
        return Err(Error::Contract(format!(
            "{} forecasts but {} weights",
            per_scale.len(),
            weights.len()
        )));
    }
    let b = per_scale[0].shape()[0];
    let mut mixed = vec![T::zero(); b * h];
    for (i, (y, &w)) in per_scale.iter().zip(&weights).enumerate() {
        if y.rank() != 2 || y.shape()[0] != b {
            return Err(Error::Contract(format!("scale {i}: forecast shape {:?}", y.shape())));
        }
        for r in 0..b {
            let up = upsample_prediction(y.row(r), s, i, h)?;
            for (o, u) in mixed[r * h..(r + 1) * h].iter_mut().zip(up) {
                *o += w * u;
            }
        }
    }
    Ok(ForecastBundle {
        per_scale,
        weights,
        mixed: Tensor::new(vec![b, h], mixed)?,
    })
}

/// Forward without gradients, returning the mixed forecast bundle.
pub fn msft_predict_batch<T: Scalar>(
    params: &ParamStore<T>,
    bcfg: &BackboneConfig,
    mcfg: &MsftConfig,
    contexts: &[&[T]],
    horizon_len: usize,
) -> Result<ForecastBundle<T>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let out = msft_forward(&mut g, &mut b, bcfg, mcfg, contexts, horizon_len, None)?;
    let per_scale = out.preds.iter().map(|&p| g.value(p).clone()).collect();
    let weights = g.value(out.weights).data().to_vec();
    msft_predict(per_scale, weights, mcfg.s, horizon_len)
}

/// Backbone-only parameters: every MSFT module dropped and every backbone
/// tensor restored from `pretrained`, so the plain backbone path reproduces
/// the zero-shot forecast.
pub fn strip_msft<T: Scalar>(finetuned: &ParamStore<T>, pretrained: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (name, value) in pretrained.iter() {
        if !finetuned.contains(name) {
            return Err(Error::Incompatible(format!("finetuned state lacks {name}")));
        }
        out.insert(name, value.clone())?;
    }
    Ok(out)
}
