//! Training loop with per-epoch validation and early stopping, plus
//! pretraining and evaluation entry points.

use std::collections::BTreeMap;
use std::io::Write;

use crate::backbone::{init_backbone, BackboneConfig};
use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::msft::MsftConfig;
use crate::numerics::{Graph, Rng, Tensor};
use crate::params::{Binder, ParamStore};
use crate::scalar::{compensated_sum, Scalar};
use crate::training::metrics::{self, MetricAccumulator, MetricReport};
use crate::training::model::{Mode, Model};
use crate::training::optim::{adamw_step, AdamW, OptimState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamW,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps between validations.
    pub steps_per_epoch: usize,
    pub patience: usize,
    pub seed: u64,
    /// Validation uses at most this many evenly spaced windows.
    pub val_windows: usize,
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            optim: AdamW::new(mode.default_lr()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optim.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.eval_batch == 0 || self.val_windows == 0 {
            return Err(Error::Config("batch size, epoch length and validation size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: AdamW::new(5e-5),
            batch_size: 16,
            max_epochs: 10,
            steps_per_epoch: 50,
            patience: 3,
            seed: 0,
            val_windows: 128,
            eval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Validation loss before any update.
    pub initial_val: f64,
    pub best_val: f64,
    /// Epoch of the restored snapshot; 0 is the untrained state.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: u64,
}

/// Best-so-far tracking with a snapshot of the trainable parameters.
#[derive(Debug, Clone)]
pub struct EarlyStopState<T> {
    pub best: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub patience: usize,
    snapshot: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> EarlyStopState<T> {
    pub fn new(model: &Model<T>, initial: f64, patience: usize) -> Result<Self> {
        Ok(Self {
            best: initial,
            best_epoch: 0,
            since_improvement: 0,
            patience,
            snapshot: snapshot(model)?,
        })
    }

    /// Records a validation result; returns true when training should stop.
    pub fn observe(&mut self, model: &Model<T>, epoch: usize, val: f64) -> Result<bool> {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            self.snapshot = snapshot(model)?;
        } else {
            self.since_improvement += 1;
        }
        Ok(self.since_improvement >= self.patience)
    }

    pub fn restore(&self, model: &mut Model<T>) -> Result<()> {
        for (name, t) in &self.snapshot {
            model.params.set(name, t.clone())?;
        }
        Ok(())
    }
}

fn snapshot<T: Scalar>(model: &Model<T>) -> Result<BTreeMap<String, Tensor<T>>> {
    model
        .trainable
        .iter()
        .map(|n| Ok((n.clone(), model.params.get(n)?.clone())))
        .collect()
}

fn to_scalar<T: Scalar>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::of(v)).collect()
}

/// Forecasts of windows `idx` of `data` as `f64` rows.
fn forecast<T: Scalar>(model: &Model<T>, data: &WindowDataset, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    let ctx: Vec<Vec<T>> = idx.iter().map(|&i| to_scalar(data.context(i))).collect();
    let refs: Vec<&[T]> = ctx.iter().map(Vec::as_slice).collect();
    let pred = model.predict(&refs, data.horizon_len)?;
    if !pred.all_finite() {
        return Err(Error::NonFinite("forecast".into()));
    }
    let h = data.horizon_len;
    Ok((0..idx.len()).map(|r| pred.data()[r * h..(r + 1) * h].iter().map(|v| v.as_f64()).collect()).collect())
}

/// Mean per-window MSE of the model's forecasts.
pub fn validation_loss<T: Scalar>(model: &Model<T>, data: &WindowDataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("empty validation set".into()));
    }
    let mut per_window = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        for (r, &i) in forecast(model, data, chunk)?.iter().zip(chunk) {
            per_window.push(metrics::mse(r, data.horizon(i)));
        }
    }
    Ok(compensated_sum(per_window.iter().copied()) / per_window.len() as f64)
}

/// Trains the model's trainable partition and restores the best validation
/// snapshot. A zero-shot model is only validated.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &WindowDataset,
    val: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let val = val.subsample(cfg.val_windows);
    let initial_val = validation_loss(model, &val, cfg.eval_batch)?;
    let mut log = vec![LogRow {
        step: 0,
        train_loss: None,
        val_loss: Some(initial_val),
        weights: model.mixing_weights()?,
    }];
    let mut stop = EarlyStopState::new(model, initial_val, cfg.patience)?;
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        initial_val,
        best_val: initial_val,
        best_epoch: 0,
        epochs_run: 0,
        steps: 0,
    };
    if model.trainable.is_empty() {
        outcome.log = log;
        return Ok(outcome);
    }

    let mut state = OptimState::new(&model.params, &model.trainable)?;
    let mut rng = Rng::stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for epoch in 1..=cfg.max_epochs {
        for _ in 0..cfg.steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(train.len()) {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let ctx: Vec<Vec<T>> = batch.iter().map(|&i| to_scalar(train.context(i))).collect();
            let hor: Vec<Vec<T>> = batch.iter().map(|&i| to_scalar(train.horizon(i))).collect();
            let c: Vec<&[T]> = ctx.iter().map(Vec::as_slice).collect();
            let h: Vec<&[T]> = hor.iter().map(Vec::as_slice).collect();

            let mut g = Graph::new();
            let mut binder = Binder::new(&model.params, &model.trainable);
            let loss = model.loss(&mut g, &mut binder, &c, &h)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", state.step + 1)));
            }
            let grads = g.backward(loss)?;
            let named = binder.gradients(&grads);
            drop(binder);
            adamw_step(&mut model.params, &named, &mut state, &cfg.optim)?;
            log.push(LogRow {
                step: state.step,
                train_loss: Some(loss_value),
                val_loss: None,
                weights: model.mixing_weights()?,
            });
        }
        let v = validation_loss(model, &val, cfg.eval_batch)?;
        log.last_mut().expect("a step was logged").val_loss = Some(v);
        outcome.epochs_run = epoch;
        log::debug!("epoch {epoch}: val {v:.6}");
        if stop.observe(model, epoch, v)? {
            break;
        }
    }
    stop.restore(model)?;
    outcome.log = log;
    outcome.best_val = stop.best;
    outcome.best_epoch = stop.best_epoch;
    outcome.steps = state.step;
    Ok(outcome)
}

/// Masked-reconstruction pretraining of a fresh backbone: the horizon
/// patches are replaced by the mask token and reconstructed.
pub fn pretrain(
    bcfg: &BackboneConfig,
    train_set: &WindowDataset,
    val: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, TrainOutcome)> {
    let mut rng = Rng::stream(cfg.seed, 0);
    let params = init_backbone::<f32>(bcfg, &mut rng)?;
    let mut model = Model::from_pretrained(&params, *bcfg, Mode::Full, MsftConfig::default(), cfg.seed)?;
    let outcome = train(&mut model, train_set, val, cfg)?;
    Ok((model.params, outcome))
}

/// Wraps `pretrained` for `mode` and trains it.
pub fn finetune(
    pretrained: &ParamStore<f32>,
    bcfg: &BackboneConfig,
    mode: Mode,
    msft: MsftConfig,
    train_set: &WindowDataset,
    val: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainOutcome)> {
    let mut model = Model::from_pretrained(pretrained, *bcfg, mode, msft, cfg.seed)?;
    let outcome = train(&mut model, train_set, val, cfg)?;
    Ok((model, outcome))
}

/// Metrics of the model's forecasts averaged over every window of `test`.
pub fn evaluate<T: Scalar>(model: &Model<T>, test: &WindowDataset, seasonality: usize, batch: usize) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let mut acc = MetricAccumulator::new(seasonality);
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        for (r, &i) in forecast(model, test, chunk)?.iter().zip(chunk) {
            acc.push(r, test.horizon(i));
        }
    }
    Ok(acc.finish())
}

/// `step,train_loss,val_loss,w0..wK`; missing values are empty cells.
pub fn write_log(out: impl Write, log: &[LogRow]) -> Result<()> {
    let k = log.iter().map(|r| r.weights.len()).max().unwrap_or(1);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "train_loss".into(), "val_loss".into()];
    header.extend((0..k).map(|i| format!("w{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for r in log {
        let mut rec = vec![r.step.to_string(), opt(r.train_loss), opt(r.val_loss)];
        rec.extend(r.weights.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal; NaN as `NaN`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() { "NaN".into() } else { format!("{v}") }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv write: {other:?}")),
    }
}
