//! Series tables, CSV ingestion, synthetic series, sliding windows and
//! train-statistic normalization.

use std::f64::consts::PI;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Equal-length univariate columns. Timestamps, when present, are kept only
/// for reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub timestamps: Option<Vec<String>>,
}

impl SeriesTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Contract(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        if let Some(first) = columns.first() {
            if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != first.len()) {
                return Err(Error::Contract(format!(
                    "column {} has length {}, expected {}",
                    names[i],
                    c.len(),
                    first.len()
                )));
            }
        }
        if let Some(name) = names
            .iter()
            .zip(&columns)
            .find(|(_, c)| c.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
        {
            return Err(Error::NonFinite(format!("column {name}")));
        }
        Ok(Self {
            names,
            columns,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SeriesTable> {
    let file = std::fs::File::open(path)?;
    parse_csv(file)
}

/// Parses a comma-separated table. The first row is a header when any of its
/// cells fails to parse as a number; column 0 is a timestamp column when it
/// fails to parse on the first data row. Rows in errors are 1-based file rows.
pub fn parse_csv(reader: impl Read) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: e.position().map_or(i + 1, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((i + 1, rec));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: "empty file".into(),
        });
    }
    let numeric = |s: &str| s.parse::<f64>().is_ok();
    let has_header = !rows[0].1.iter().all(numeric);
    let header = if has_header { Some(rows.remove(0)) } else { None };
    let Some((_, first)) = rows.first() else {
        return Err(Error::Parse {
            row: 2,
            column: 1,
            message: "no data rows".into(),
        });
    };
    let has_time = !numeric(&first[0]);
    let skip = usize::from(has_time);
    let width = first.len();
    if width <= skip {
        return Err(Error::Parse {
            row: rows[0].0,
            column: 1,
            message: "no numeric columns".into(),
        });
    }
    let names = match &header {
        Some((row, h)) => {
            if h.len() != width {
                return Err(Error::Parse {
                    row: *row,
                    column: h.len().min(width) + 1,
                    message: format!("header has {} fields, data has {width}", h.len()),
                });
            }
            h.iter().skip(skip).map(str::to_string).collect()
        }
        None => (skip..width).map(|j| format!("col{}", j - skip)).collect(),
    };
    let mut columns = vec![Vec::with_capacity(rows.len()); width - skip];
    let mut stamps = Vec::new();
    for (row, rec) in &rows {
        if rec.len() != width {
            return Err(Error::Parse {
                row: *row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        if has_time {
            stamps.push(rec[0].to_string());
        }
        for (j, col) in columns.iter_mut().enumerate() {
            let cell = &rec[j + skip];
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: *row,
                column: j + skip + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: *row,
                    column: j + skip + 1,
                    message: format!("non-finite cell {cell:?}"),
                });
            }
            col.push(v);
        }
    }
    let mut table = SeriesTable::new(names, columns)?;
    table.timestamps = has_time.then_some(stamps);
    Ok(table)
}

/// Sum of sinusoids plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// `(period, amplitude, phase)` per component.
    pub components: Vec<(f64, f64, f64)>,
    pub noise: f64,
    pub len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            components: vec![(8.0, 1.0, 0.0), (64.0, 2.0, 0.0)],
            noise: 0.1,
            len: 20_000,
            seed: 0,
        }
    }
}

pub fn synth_series(spec: &SynthSpec) -> Result<SeriesTable> {
    if let Some(&(p, _, _)) = spec.components.iter().find(|c| !(c.0 >= 2.0)) {
        return Err(Error::Config(format!("period {p} must be at least 2")));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise sigma {} must be non-negative", spec.noise)));
    }
    let mut rng = Rng::new(spec.seed);
    let values = (0..spec.len)
        .map(|t| {
            let clean: f64 = spec
                .components
                .iter()
                .map(|&(p, a, ph)| a * (2.0 * PI * t as f64 / p + ph).sin())
                .sum();
            let eps = if spec.noise > 0.0 { spec.noise * rng.normal() } else { 0.0 };
            clean + eps
        })
        .collect();
    SeriesTable::new(vec!["value".into()], vec![values])
}

/// Train/val/test fractions of the time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl SplitSpec {
    pub fn ett() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }

    /// Boundaries on a series of length `t`; the test segment takes the rest.
    pub fn ranges(&self, t: usize) -> Result<[Range<usize>; 3]> {
        self.validate()?;
        let cut = |f: f64| ((t as f64 * f) + 1e-9).floor() as usize;
        let a = cut(self.train).min(t);
        let b = cut(self.train + self.val).clamp(a, t);
        Ok([0..a, a..b, b..t])
    }
}

/// Sliding windows over shared columns; each window is `(column, start)` and
/// covers `start..start + C + H`.
#[derive(Debug, Clone)]
pub struct WindowDataset {
    pub context_len: usize,
    pub horizon_len: usize,
    columns: Arc<Vec<Vec<f64>>>,
    index: Vec<(usize, usize)>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `(column, start)` of window `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        self.index[i]
    }

    pub fn context(&self, i: usize) -> &[f64] {
        let (c, s) = self.index[i];
        &self.columns[c][s..s + self.context_len]
    }

    pub fn horizon(&self, i: usize) -> &[f64] {
        let (c, s) = self.index[i];
        let a = s + self.context_len;
        &self.columns[c][a..a + self.horizon_len]
    }

    /// Every `step`-th window, at most `max` of them.
    pub fn subsample(&self, max: usize) -> Self {
        let step = self.len().div_ceil(max.max(1)).max(1);
        Self {
            index: self.index.iter().step_by(step).copied().take(max).collect(),
            ..self.clone()
        }
    }
}

/// Windows of one contiguous segment of every column.
pub fn windows_in(
    table: &SeriesTable,
    range: Range<usize>,
    context_len: usize,
    horizon_len: usize,
    stride: usize,
) -> Result<WindowDataset> {
    windows_shared(Arc::new(table.columns.clone()), range, context_len, horizon_len, stride, "segment")
}

fn windows_shared(
    columns: Arc<Vec<Vec<f64>>>,
    range: Range<usize>,
    context_len: usize,
    horizon_len: usize,
    stride: usize,
    name: &str,
) -> Result<WindowDataset> {
    if context_len == 0 || horizon_len == 0 || stride == 0 {
        return Err(Error::Config("context, horizon and stride must be positive".into()));
    }
    let w = context_len + horizon_len;
    if range.len() < w {
        return Err(Error::Config(format!(
            "{name} split has {} steps, fewer than the window size {w}",
            range.len()
        )));
    }
    let starts: Vec<usize> = (range.start..=range.end - w).step_by(stride).collect();
    let index = (0..columns.len())
        .flat_map(|c| starts.iter().map(move |&s| (c, s)))
        .collect();
    Ok(WindowDataset {
        context_len,
        horizon_len,
        columns,
        index,
    })
}

#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
    pub ranges: [Range<usize>; 3],
}

/// Per-split sliding windows; no window crosses a split boundary.
pub fn make_windows(
    table: &SeriesTable,
    context_len: usize,
    horizon_len: usize,
    stride: usize,
    split: SplitSpec,
) -> Result<SplitWindows> {
    let ranges = split.ranges(table.len())?;
    let cols = Arc::new(table.columns.clone());
    let mut sets = ranges
        .iter()
        .zip(SPLIT_NAMES)
        .map(|(r, n)| windows_shared(cols.clone(), r.clone(), context_len, horizon_len, stride, n));
    let (train, val, test) = (
        sets.next().expect("three splits")?,
        sets.next().expect("three splits")?,
        sets.next().expect("three splits")?,
    );
    Ok(SplitWindows {
        train,
        val,
        test,
        ranges,
    })
}

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Per-column z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on `range` of every column (population standard deviation).
    pub fn fit(table: &SeriesTable, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > table.len() {
            return Err(Error::Contract(format!(
                "normalizer range {range:?} invalid for length {}",
                table.len()
            )));
        }
        let n = range.len() as f64;
        let (mean, std) = table
            .columns
            .iter()
            .map(|c| {
                let seg = &c[range.clone()];
                let m = seg.iter().sum::<f64>() / n;
                let var = seg.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                (m, var.sqrt().max(SIGMA_FLOOR))
            })
            .unzip();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, column: usize, x: f64) -> f64 {
        (x - self.mean[column]) / self.std[column]
    }

    pub fn denormalize(&self, column: usize, z: f64) -> f64 {
        z * self.std[column] + self.mean[column]
    }

    pub fn normalize_table(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map_table(table, |c, x| self.normalize(c, x))
    }

    pub fn denormalize_table(&self, table: &SeriesTable) -> Result<SeriesTable> {
        self.map_table(table, |c, x| self.denormalize(c, x))
    }

    fn map_table(&self, table: &SeriesTable, f: impl Fn(usize, f64) -> f64) -> Result<SeriesTable> {
        if table.num_columns() != self.mean.len() {
            return Err(Error::Contract(format!(
                "normalizer has {} columns, table has {}",
                self.mean.len(),
                table.num_columns()
            )));
        }
        let columns = table
            .columns
            .iter()
            .enumerate()
            .map(|(c, col)| col.iter().map(|&x| f(c, x)).collect())
            .collect();
        Ok(SeriesTable {
            names: table.names.clone(),
            columns,
            timestamps: table.timestamps.clone(),
        })
    }
}

/// Sample autocorrelation at lags `1..=max_lag`; all zeros for a constant
/// window.
pub fn acf(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if x.len() <= max_lag {
        return Err(Error::Contract(format!(
            "window length {} must exceed max lag {max_lag}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let d: Vec<f64> = x.iter().map(|v| v - m).collect();
    let denom: f64 = d.iter().map(|v| v * v).sum();
    if denom <= f64::EPSILON * n * m.abs().max(1.0).powi(2) {
        return Ok(vec![0.0; max_lag]);
    }
    Ok((1..=max_lag)
        .map(|k| d.iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / denom)
        .collect())
}
