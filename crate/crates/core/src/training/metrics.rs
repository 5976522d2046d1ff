//! Point-forecast metrics.
//!
//! Per-window values are averaged over windows. Terms whose denominator is
//! zero are skipped for sMAPE and ND and counted; MASE and NRMSE of a window
//! with a zero denominator are NaN and left out of the mean (the report keeps
//! the count). A metric with no defined window is NaN.

use crate::scalar::compensated_sum;

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    mean(pred.iter().zip(target).map(|(p, y)| (y - p) * (y - p)), pred.len())
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    mean(pred.iter().zip(target).map(|(p, y)| (y - p).abs()), pred.len())
}

/// `200/H · Σ |y - p| / (|y| + |p|)` over terms with a nonzero denominator,
/// with the number of skipped terms.
pub fn smape(pred: &[f64], target: &[f64]) -> (f64, usize) {
    let mut skipped = 0;
    let terms: Vec<f64> = pred
        .iter()
        .zip(target)
        .filter_map(|(p, y)| {
            let den = y.abs() + p.abs();
            if den == 0.0 {
                skipped += 1;
                None
            } else {
                Some((y - p).abs() / den)
            }
        })
        .collect();
    (200.0 * mean(terms.iter().copied(), terms.len()), skipped)
}

/// MAE scaled by the mean absolute lag-`m` difference of the target; NaN when
/// the horizon is not longer than `m` or that scale is zero.
pub fn mase(pred: &[f64], target: &[f64], m: usize) -> f64 {
    let h = target.len();
    if m == 0 || h <= m {
        return f64::NAN;
    }
    let scale = mean((m..h).map(|j| (target[j] - target[j - m]).abs()), h - m);
    if scale == 0.0 {
        return f64::NAN;
    }
    mae(pred, target) / scale
}

/// `100/H · Σ |(y - p) / y|` over nonzero targets, with the skipped count.
pub fn nd(pred: &[f64], target: &[f64]) -> (f64, usize) {
    let mut skipped = 0;
    let terms: Vec<f64> = pred
        .iter()
        .zip(target)
        .filter_map(|(p, y)| {
            if *y == 0.0 {
                skipped += 1;
                None
            } else {
                Some(((y - p) / y).abs())
            }
        })
        .collect();
    (100.0 * mean(terms.iter().copied(), terms.len()), skipped)
}

/// RMSE over the target range; NaN for a flat target.
pub fn nrmse(pred: &[f64], target: &[f64]) -> f64 {
    let lo = target.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return f64::NAN;
    }
    mse(pred, target).sqrt() / range
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    compensated_sum(values) / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mase: f64,
    pub nd: f64,
    pub nrmse: f64,
    pub windows: usize,
    pub seasonality: usize,
    /// sMAPE terms with `|y| + |p| = 0`.
    pub smape_skipped: usize,
    /// ND terms with `y = 0`.
    pub nd_skipped: usize,
    /// Windows whose MASE is undefined.
    pub mase_undefined: usize,
    /// Windows whose NRMSE is undefined.
    pub nrmse_undefined: usize,
}

impl MetricReport {
    pub const HEADER: [&'static str; 6] = ["mse", "mae", "smape", "mase", "nd", "nrmse"];

    pub fn values(&self) -> [f64; 6] {
        [self.mse, self.mae, self.smape, self.mase, self.nd, self.nrmse]
    }
}

/// Accumulates per-window metrics in insertion order.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    seasonality: usize,
    cols: [Vec<f64>; 6],
    smape_skipped: usize,
    nd_skipped: usize,
    windows: usize,
}

impl MetricAccumulator {
    pub fn new(seasonality: usize) -> Self {
        Self {
            seasonality,
            ..Self::default()
        }
    }

    pub fn push(&mut self, pred: &[f64], target: &[f64]) {
        assert_eq!(pred.len(), target.len(), "forecast and target lengths differ");
        let (s, ss) = smape(pred, target);
        let (n, ns) = nd(pred, target);
        self.smape_skipped += ss;
        self.nd_skipped += ns;
        let row = [
            mse(pred, target),
            mae(pred, target),
            s,
            mase(pred, target, self.seasonality),
            n,
            nrmse(pred, target),
        ];
        for (c, v) in self.cols.iter_mut().zip(row) {
            c.push(v);
        }
        self.windows += 1;
    }

    pub fn finish(&self) -> MetricReport {
        let avg = |c: &Vec<f64>| {
            let ok: Vec<f64> = c.iter().copied().filter(|v| !v.is_nan()).collect();
            mean(ok.iter().copied(), ok.len())
        };
        let undefined = |c: &Vec<f64>| c.iter().filter(|v| v.is_nan()).count();
        MetricReport {
            mse: avg(&self.cols[0]),
            mae: avg(&self.cols[1]),
            smape: avg(&self.cols[2]),
            mase: avg(&self.cols[3]),
            nd: avg(&self.cols[4]),
            nrmse: avg(&self.cols[5]),
            windows: self.windows,
            seasonality: self.seasonality,
            smape_skipped: self.smape_skipped,
            nd_skipped: self.nd_skipped,
            mase_undefined: undefined(&self.cols[3]),
            nrmse_undefined: undefined(&self.cols[5]),
        }
    }
}
