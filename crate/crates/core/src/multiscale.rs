//! Multi-scale views of a (context, horizon) sample and the token-level
//! alignment between adjacent scales.
//!
//! Scale `i` is produced from scale `i - 1` by non-overlapping average
//! pooling with stride `s`. The context is padded on the left (so it stays
//! aligned with the forecast origin at its right edge) and the horizon on the
//! right; both pads replicate the edge value. Token alignment is derived from
//! the absolute time span each token covers, which keeps the right-aligned
//! context and the left-aligned horizon consistent at every scale.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadSide {
    Pre,
    Post,
}

/// Number of extra scales and the pooling factor between neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSpec {
    pub k: usize,
    pub s: usize,
}

impl ScaleSpec {
    pub fn new(k: usize, s: usize) -> Result<Self> {
        if s < 2 {
            return Err(Error::Config(format!(
                "downsampling factor must be at least 2, got {s}"
            )));
        }
        Ok(Self { k, s })
    }

    pub fn num_scales(&self) -> usize {
        self.k + 1
    }
}

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Length after `i` chained poolings: `⌈…⌈L/s⌉…/s⌉`.
pub fn chained_len(len: usize, s: usize, i: usize) -> usize {
    (0..i).fold(len, |l, _| ceil_div(l, s))
}

/// Length from the closed form `⌈L/sⁱ⌉`.
pub fn direct_len(len: usize, s: usize, i: usize) -> usize {
    ceil_div(len, s.pow(i as u32))
}

/// Every `(len, s, i)` for which the chained and closed-form lengths differ.
/// The chained lengths are the ones used everywhere.
pub fn length_disagreements(
    lens: Range<usize>,
    factors: &[usize],
    max_i: usize,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for len in lens {
        for &s in factors {
            for i in 0..=max_i {
                if chained_len(len, s, i) != direct_len(len, s, i) {
                    out.push((len, s, i));
                }
            }
        }
    }
    out
}

/// Non-overlapping mean pooling with stride `s` after padding to a multiple
/// of `s` with the edge value on `side`.
pub fn avg_downsample<T: Scalar>(x: &[T], s: usize, side: PadSide) -> Result<Vec<T>> {
    if s < 2 {
        return Err(Error::Config(format!(
            "downsampling factor must be at least 2, got {s}"
        )));
    }
    if x.is_empty() {
        return Err(Error::Contract("cannot downsample an empty series".into()));
    }
    let pad = (s - x.len() % s) % s;
    let mut padded = Vec::with_capacity(x.len() + pad);
    match side {
        PadSide::Pre => {
            padded.extend(std::iter::repeat(x[0]).take(pad));
            padded.extend_from_slice(x);
        }
        PadSide::Post => {
            padded.extend_from_slice(x);
            padded.extend(std::iter::repeat(x[x.len() - 1]).take(pad));
        }
    }
    let n = T::of_usize(s);
    Ok(padded
        .chunks(s)
        .map(|w| w.iter().copied().sum::<T>() / n)
        .collect())
}

/// One scale of a [`MultiScaleSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleView<T> {
    pub context: Vec<T>,
    /// Downsampled horizon; present for training samples only.
    pub horizon: Option<Vec<T>>,
    pub horizon_len: usize,
    /// Edge-replicated steps prepended when pooling from the previous scale.
    pub context_pad: usize,
    /// Edge-replicated steps appended when pooling from the previous scale.
    pub horizon_pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleSet<T> {
    pub spec: ScaleSpec,
    pub scales: Vec<ScaleView<T>>,
}

impl<T: Scalar> MultiScaleSet<T> {
    pub fn lengths(&self) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .map(|v| (v.context.len(), v.horizon_len))
            .collect()
    }
}

/// Build the `K + 1` scale views by chained pooling. Scale 0 is the input.
pub fn build_multiscale_set<T: Scalar>(
    context: &[T],
    horizon: Option<&[T]>,
    horizon_len: usize,
    spec: ScaleSpec,
) -> Result<MultiScaleSet<T>> {
    let c = context.len();
    if c == 0 || horizon_len == 0 {
        return Err(Error::Contract("context and horizon must be non-empty".into()));
    }
    if let Some(h) = horizon {
        if h.len() != horizon_len {
            return Err(Error::Contract(format!(
                "horizon has {} steps, expected {horizon_len}",
                h.len()
            )));
        }
    }
    for i in 1..=spec.k {
        if c < spec.s.pow(i as u32) {
            return Err(Error::Config(format!(
                "context length {c} is shorter than {}^{i}, so scale {i} would keep less than one step",
                spec.s
            )));
        }
    }
    let mut scales = Vec::with_capacity(spec.k + 1);
    scales.push(ScaleView {
        context: context.to_vec(),
        horizon: horizon.map(<[T]>::to_vec),
        horizon_len,
        context_pad: 0,
        horizon_pad: 0,
    });
    for _ in 1..=spec.k {
        let prev = scales.last().unwrap();
        let ctx_len = prev.context.len();
        let hor_len = prev.horizon_len;
        let context = avg_downsample(&prev.context, spec.s, PadSide::Pre)?;
        let horizon = match &prev.horizon {
            Some(h) => Some(avg_downsample(h, spec.s, PadSide::Post)?),
            None => None,
        };
        scales.push(ScaleView {
            context,
            horizon,
            horizon_len: ceil_div(hor_len, spec.s),
            context_pad: (spec.s - ctx_len % spec.s) % spec.s,
            horizon_pad: (spec.s - hor_len % spec.s) % spec.s,
        });
    }
    Ok(MultiScaleSet { spec, scales })
}

/// Token sub-ranges of one scale inside the concatenated token axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSpan {
    pub context: Range<usize>,
    pub horizon: Range<usize>,
}

impl ScaleSpan {
    pub fn range(&self) -> Range<usize> {
        self.context.start..self.horizon.end
    }

    pub fn len(&self) -> usize {
        self.horizon.end - self.context.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn n_horizon(&self) -> usize {
        self.horizon.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleIndexMap {
    spans: Vec<ScaleSpan>,
    total: usize,
}

impl ScaleIndexMap {
    /// Contiguous spans in scale order from per-scale `(context, horizon)`
    /// token counts.
    pub fn new(counts: &[(usize, usize)]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Contract("no scales".into()));
        }
        let mut spans = Vec::with_capacity(counts.len());
        let mut cursor = 0;
        for (i, &(nc, nh)) in counts.iter().enumerate() {
            if nc == 0 || nh == 0 {
                return Err(Error::Contract(format!(
                    "scale {i} has {nc} context and {nh} horizon tokens; both must be positive"
                )));
            }
            spans.push(ScaleSpan {
                context: cursor..cursor + nc,
                horizon: cursor + nc..cursor + nc + nh,
            });
            cursor += nc + nh;
        }
        Ok(Self {
            spans,
            total: cursor,
        })
    }

    pub fn spans(&self) -> &[ScaleSpan] {
        &self.spans
    }

    pub fn span(&self, scale: usize) -> &ScaleSpan {
        &self.spans[scale]
    }

    pub fn num_scales(&self) -> usize {
        self.spans.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn counts(&self) -> Vec<(usize, usize)> {
        self.spans
            .iter()
            .map(|s| (s.n_context(), s.n_horizon()))
            .collect()
    }

    /// Scale owning global token `t`.
    pub fn scale_of(&self, t: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.range().contains(&t))
    }
}

/// Token correspondence between scale `fine` and scale `fine + 1`. Indices
/// are local to each scale (context tokens first, then horizon tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairAlignment {
    pub fine: usize,
    pub n_fine: usize,
    pub n_coarse: usize,
    /// Coarse token covering each fine token.
    pub fine_to_coarse: Arc<Vec<usize>>,
    /// Fine tokens covered by each coarse token, ascending.
    pub groups: Arc<Vec<Vec<usize>>>,
}

impl PairAlignment {
    pub fn max_fan_out(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pairs: Vec<PairAlignment>,
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

/// Assign each fine token to the coarse token with the largest time-span
/// overlap (ties go to the earlier coarse token). Spans are expressed in
/// fine-scale steps measured away from the segment's anchor edge, so the
/// patch size cancels out: fine token `r` covers `[r, r+1)` patches and
/// coarse token `q` covers `[q·s, (q+1)·s)` fine patches.
fn align_segment(n_fine: usize, n_coarse: usize, s: usize, anchored_right: bool) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n_fine);
    for j in 0..n_fine {
        let r = if anchored_right { n_fine - 1 - j } else { j };
        let fine_span = (r, r + 1);
        let mut best: Option<(usize, usize)> = None;
        for c in 0..n_coarse {
            let q = if anchored_right { n_coarse - 1 - c } else { c };
            let ov = overlap(fine_span, (q * s, (q + 1) * s));
            let better = match best {
                None => ov > 0,
                Some((_, b)) => ov > b,
            };
            if better {
                best = Some((c, ov));
            }
        }
        let (c, _) = best.ok_or_else(|| {
            Error::Alignment(format!(
                "fine token {j} of {n_fine} lies outside the {n_coarse} coarse tokens"
            ))
        })?;
        out.push(c);
    }
    Ok(out)
}

impl AlignmentMap {
    /// Alignment for every adjacent scale pair of `map`, with pooling factor `s`.
    pub fn new(map: &ScaleIndexMap, s: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(map.num_scales().saturating_sub(1));
        for fine in 0..map.num_scales().saturating_sub(1) {
            let f = map.span(fine);
            let c = map.span(fine + 1);
            let ctx = align_segment(f.n_context(), c.n_context(), s, true)?;
            let hor = align_segment(f.n_horizon(), c.n_horizon(), s, false)?;
            let mut fine_to_coarse = ctx;
            fine_to_coarse.extend(hor.into_iter().map(|q| q + c.n_context()));
            let n_coarse = c.len();
            let mut groups = vec![Vec::new(); n_coarse];
            for (j, &q) in fine_to_coarse.iter().enumerate() {
                groups[q].push(j);
            }
            if let Some(empty) = groups.iter().position(Vec::is_empty) {
                return Err(Error::Alignment(format!(
                    "coarse token {empty} of scale {} covers no token of scale {fine}",
                    fine + 1
                )));
            }
            pairs.push(PairAlignment {
                fine,
                n_fine: f.len(),
                n_coarse,
                fine_to_coarse: Arc::new(fine_to_coarse),
                groups: Arc::new(groups),
            });
        }
        Ok(Self { pairs })
    }

    /// Alignment between scale `fine` and `fine + 1`.
    pub fn pair(&self, fine: usize) -> &PairAlignment {
        &self.pairs[fine]
    }

    pub fn pairs(&self) -> &[PairAlignment] {
        &self.pairs
    }

    /// Local index at scale `to` of the token covering local token `t` of
    /// scale `from` (`from <= to`).
    pub fn map_to_coarser(&self, from: usize, to: usize, t: usize) -> usize {
        (from..to).fold(t, |idx, fine| self.pairs[fine].fine_to_coarse[idx])
    }
}

fn check_rows<T: Scalar>(x: &Tensor<T>, expected: usize, what: &str) -> Result<usize> {
    if x.rank() != 2 || x.shape()[0] != expected {
        return Err(Error::Alignment(format!(
            "{what} expects {expected} rows, got shape {:?}",
            x.shape()
        )));
    }
    Ok(x.shape()[1])
}

/// Copy each coarse row to every fine row it covers.
pub fn token_repeat<T: Scalar>(h_coarse: &Tensor<T>, align: &PairAlignment) -> Result<Tensor<T>> {
    let d = check_rows(h_coarse, align.n_coarse, "token_repeat")?;
    let mut out = Vec::with_capacity(align.n_fine * d);
    for &q in align.fine_to_coarse.iter() {
        out.extend_from_slice(h_coarse.row(q));
    }
    Tensor::new(vec![align.n_fine, d], out)
}

/// Mean of the fine rows covered by each coarse row.
pub fn token_avgpool<T: Scalar>(h_fine: &Tensor<T>, align: &PairAlignment) -> Result<Tensor<T>> {
    let d = check_rows(h_fine, align.n_fine, "token_avgpool")?;
    let mut out = vec![T::zero(); align.n_coarse * d];
    for (q, group) in align.groups.iter().enumerate() {
        let dst = &mut out[q * d..(q + 1) * d];
        for &j in group {
            for (o, &v) in dst.iter_mut().zip(h_fine.row(j)) {
                *o += v;
            }
        }
        let n = T::of_usize(group.len());
        for o in dst.iter_mut() {
            *o /= n;
        }
    }
    Tensor::new(vec![align.n_coarse, d], out)
}

/// Repeat every step of a scale-`i` forecast `sⁱ` times and truncate to `h`.
pub fn upsample_prediction<T: Scalar>(yhat: &[T], s: usize, i: usize, h: usize) -> Result<Vec<T>> {
    let expected = chained_len(h, s, i);
    if yhat.len() != expected {
        return Err(Error::Contract(format!(
            "scale {i} forecast has {} steps, expected {expected}",
            yhat.len()
        )));
    }
    let factor = s.pow(i as u32);
    Ok(yhat
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(factor))
        .take(h)
        .collect())
}
