//! Scale-confounding diagnostics and attention heatmap export.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use statrs::function::erf::erfc;

use crate::backbone::{backbone_forward, BackboneConfig};
use crate::data::{acf, WindowDataset};
use crate::error::{Error, Result};
use crate::msft::{msft_forward, AttentionMode, MsftConfig};
use crate::multiscale::{build_multiscale_set, ScaleSpec};
use crate::numerics::Graph;
use crate::params::{Binder, ParamStore};
use crate::scalar::compensated_sum;
use crate::training::trainer::csv_err;

pub const ACF_MAX_LAG: usize = 24;

/// One `(S, X, M)` observation: scale index, mean |ACF| of the scale's
/// context and the norm of its mean context-token embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTriplet {
    pub window: usize,
    pub scale: usize,
    pub acf: f64,
    pub norm: f64,
}

/// Mean absolute autocorrelation over lags `1..=max_lag`, with the lag
/// range shortened for windows of at most `max_lag` steps.
pub fn acf_summary(x: &[f64], max_lag: usize) -> Result<f64> {
    let lags = max_lag.min(x.len().saturating_sub(1));
    if lags == 0 {
        return Err(Error::Contract(format!("window of {} steps has no lags", x.len())));
    }
    let r = acf(x, lags)?;
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / lags as f64)
}

/// Runs every scale of each context alone through the frozen backbone and
/// records a triplet per (window, scale). `layer` selects the block whose
/// output is summarized (0-based).
pub fn collect_triplets(
    params: &ParamStore<f32>,
    bcfg: &BackboneConfig,
    data: &WindowDataset,
    spec: ScaleSpec,
    layer: usize,
) -> Result<Vec<ScaleTriplet>> {
    if layer >= bcfg.layers {
        return Err(Error::Index {
            op: "collect_triplets",
            detail: format!("layer {layer} of {}", bcfg.layers),
        });
    }
    let truncated = BackboneConfig {
        layers: layer + 1,
        ..*bcfg
    };
    let mut out = Vec::with_capacity(data.len() * (spec.k + 1));
    for w in 0..data.len() {
        let set = build_multiscale_set(data.context(w), None, data.horizon_len, spec)?;
        for (scale, view) in set.scales.iter().enumerate() {
            let ctx: Vec<f32> = view.context.iter().map(|&v| v as f32).collect();
            let mut g = Graph::new();
            let mut b = Binder::frozen(params);
            let o = backbone_forward(&mut g, &mut b, &truncated, &[&ctx], view.horizon_len, None)?;
            let h = g.value(o.hidden);
            let d = bcfg.d;
            let mut mean = vec![0.0f64; d];
            for t in 0..o.n_context {
                for (m, v) in mean.iter_mut().zip(h.row(t)) {
                    *m += f64::from(*v);
                }
            }
            let norm = mean.iter().map(|m| (m / o.n_context as f64).powi(2)).sum::<f64>().sqrt();
            out.push(ScaleTriplet {
                window: w,
                scale,
                acf: acf_summary(&view.context, ACF_MAX_LAG)?,
                norm,
            });
        }
    }
    Ok(out)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = compensated_sum(x.iter().copied()) / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!("pearson needs equal lengths >= 2, got {} and {}", x.len(), y.len())));
    }
    let (a, b) = (centered(x), centered(y));
    let sxy = compensated_sum(a.iter().zip(&b).map(|(p, q)| p * q));
    let sxx = compensated_sum(a.iter().map(|p| p * p));
    let syy = compensated_sum(b.iter().map(|q| q * q));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in pearson correlation".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of `x` and `y` after removing the linear effect of `z`.
pub fn partial_correlation(x: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::Contract(format!("partial correlation needs n >= 4, got {}", x.len())));
    }
    let rxy = pearson(x, y)?;
    let rxz = pearson(x, z)?;
    let ryz = pearson(y, z)?;
    let den = (1.0 - rxz * rxz) * (1.0 - ryz * ryz);
    if !(den > 0.0) {
        return Err(Error::Degenerate(format!(
            "conditioning variable is perfectly correlated (r_xz = {rxz}, r_yz = {ryz})"
        )));
    }
    Ok(((rxy - rxz * ryz) / den.sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided Fisher-Z p-value of a (partial) correlation `r` from `n`
/// samples with `conditioned` controlled variables.
pub fn fisher_z_pvalue(r: f64, n: usize, conditioned: usize) -> Result<f64> {
    let dof = n as f64 - 3.0 - conditioned as f64;
    if !(dof > 0.0) {
        return Err(Error::Contract(format!("n = {n} too small for {conditioned} conditioning variables")));
    }
    if !(r.abs() < 1.0) {
        return Ok(0.0);
    }
    let z = r.atanh() * dof.sqrt();
    Ok(erfc(z.abs() / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderReport {
    pub n: usize,
    pub raw: f64,
    pub raw_p: f64,
    pub partial: f64,
    pub partial_p: f64,
}

/// Correlation of X and M, raw and conditioned on the scale index.
pub fn confounder_report(triplets: &[ScaleTriplet]) -> Result<ConfounderReport> {
    let x: Vec<f64> = triplets.iter().map(|t| t.acf).collect();
    let m: Vec<f64> = triplets.iter().map(|t| t.norm).collect();
    let s: Vec<f64> = triplets.iter().map(|t| t.scale as f64).collect();
    let n = triplets.len();
    let raw = pearson(&x, &m)?;
    let partial = partial_correlation(&x, &m, &s)?;
    Ok(ConfounderReport {
        n,
        raw,
        raw_p: fisher_z_pvalue(raw, n, 0)?,
        partial,
        partial_p: fisher_z_pvalue(partial, n, 1)?,
    })
}

pub fn write_triplets(out: impl Write, triplets: &[ScaleTriplet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window", "scale", "acf", "norm"]).map_err(csv_err)?;
    for t in triplets {
        w.write_record([t.window.to_string(), t.scale.to_string(), format!("{}", t.acf), format!("{}", t.norm)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Attention probabilities of one layer and head for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapExport {
    pub mode: AttentionMode,
    pub layer: usize,
    pub head: usize,
    pub probs: Vec<Vec<f64>>,
    /// Token range of each scale along both axes.
    pub spans: Vec<Range<usize>>,
}

impl HeatmapExport {
    pub fn scale_of(&self, token: usize) -> usize {
        self.spans.iter().position(|r| r.contains(&token)).expect("token inside a span")
    }

    /// Total probability assigned to tokens of other scales.
    pub fn cross_scale_mass(&self) -> f64 {
        let mut total = 0.0;
        for (i, row) in self.probs.iter().enumerate() {
            let si = self.scale_of(i);
            for (j, p) in row.iter().enumerate() {
                if self.scale_of(j) != si {
                    total += p;
                }
            }
        }
        total
    }

    /// Largest deviation of a row sum from one, summing only entries the
    /// mode allows.
    pub fn max_row_sum_error(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let si = self.scale_of(i);
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| self.mode != AttentionMode::InScale || self.scale_of(*j) == si)
                    .map(|(_, p)| p)
                    .sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Mean cross-scale probability on cells whose tokens share a local
    /// index, against the mean over the other cross-scale cells.
    pub fn diagonal_mass(&self) -> DiagonalMass {
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
        for (i, row) in self.probs.iter().enumerate() {
            let si = self.scale_of(i);
            let pi = i - self.spans[si].start;
            for (j, &p) in row.iter().enumerate() {
                let sj = self.scale_of(j);
                if sj == si {
                    continue;
                }
                if j - self.spans[sj].start == pi {
                    on += p;
                    n_on += 1;
                } else {
                    off += p;
                    n_off += 1;
                }
            }
        }
        let on = if n_on > 0 { on / n_on as f64 } else { f64::NAN };
        let off = if n_off > 0 { off / n_off as f64 } else { f64::NAN };
        DiagonalMass {
            on_diagonal: on,
            off_diagonal: off,
            ratio: on / off,
        }
    }

    /// `{run}_{mode}_L{layer}H{head}.csv`
    pub fn file_name(&self, run: &str) -> String {
        format!("{run}_{}_L{}H{}.csv", self.mode, self.layer, self.head)
    }

    /// Matrix CSV: the header row and first column give each token's scale.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let n = self.probs.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["scale".to_string()];
        header.extend((0..n).map(|j| self.scale_of(j).to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.probs.iter().enumerate() {
            let mut rec = vec![self.scale_of(i).to_string()];
            rec.extend(row.iter().map(|p| format!("{p}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, run: &str) -> Result<PathBuf> {
        let path = dir.join(self.file_name(run));
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::checkpoint::write_atomic(&path, &buf)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalMass {
    pub on_diagonal: f64,
    pub off_diagonal: f64,
    pub ratio: f64,
}

/// Attention of `layer`/`head` for one context under the attention mode of
/// `mcfg`.
pub fn export_attention(
    params: &ParamStore<f32>,
    bcfg: &BackboneConfig,
    mcfg: &MsftConfig,
    context: &[f32],
    horizon_len: usize,
    layer: usize,
    head: usize,
) -> Result<HeatmapExport> {
    if layer >= bcfg.layers || head >= bcfg.heads {
        return Err(Error::Index {
            op: "export_attention",
            detail: format!("layer {layer} head {head} of {} layers, {} heads", bcfg.layers, bcfg.heads),
        });
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(params);
    let mut captured = Vec::new();
    let out = msft_forward(&mut g, &mut b, bcfg, mcfg, &[context], horizon_len, Some(&mut captured))?;
    let t = &captured[layer];
    let n = t.shape()[1];
    let block = &t.data()[head * n * n..(head + 1) * n * n];
    let probs = block.chunks(n).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let spans = (0..out.layout.num_scales()).map(|i| out.layout.map.span(i).range()).collect();
    Ok(HeatmapExport {
        mode: mcfg.attention,
        layer,
        head,
        probs,
        spans,
    })
}
