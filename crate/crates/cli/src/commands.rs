//! Subcommand implementations. Every artifact is written atomically under
//! the configured output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use msft_core::checkpoint::{load_compatible, save_checkpoint, write_atomic};
use msft_core::data::{load_csv, make_windows, synth_series, Normalizer, SplitWindows};
use msft_core::diagnostics::{collect_triplets, confounder_report, export_attention, write_triplets};
use msft_core::msft::MsftConfig;
use msft_core::training::{
    ablation_run, evaluate as eval_metrics, finetune as finetune_model, pretrain as pretrain_model, validation_loss,
    write_log, MetricReport, Mode, Model, TrainOutcome,
};
use msft_core::DType;

use crate::config::{DataSource, RunConfig};

/// Learning rate of backbone pretraining when `lr` is unset.
pub const PRETRAIN_LR: f64 = 1e-3;

pub const PRETRAINED: &str = "pretrained.ckpt";

pub fn finetuned_name(mode: Mode) -> String {
    format!("finetuned_{mode}.ckpt")
}

fn fmt(v: f64) -> String {
    if v.is_nan() { "NaN".into() } else { format!("{v}") }
}

fn csv_bytes(rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?)
}

fn save(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn save_log(dir: &Path, name: &str, outcome: &TrainOutcome) -> Result<PathBuf> {
    let mut buf = Vec::new();
    write_log(&mut buf, &outcome.log)?;
    save(dir, name, &buf)
}

fn summary_rows(stage: &str, mode: Mode, o: &TrainOutcome) -> Vec<Vec<String>> {
    vec![
        ["stage", "mode", "initial_val", "best_val", "best_epoch", "epochs_run", "steps"]
            .map(String::from)
            .to_vec(),
        vec![
            stage.into(),
            mode.to_string(),
            fmt(o.initial_val),
            fmt(o.best_val),
            o.best_epoch.to_string(),
            o.epochs_run.to_string(),
            o.steps.to_string(),
        ],
    ]
}

/// Dataset label and normalized split windows.
pub fn load_data(cfg: &RunConfig) -> Result<(String, SplitWindows)> {
    let (name, table) = match &cfg.data {
        DataSource::Synth => ("synth".to_string(), synth_series(&cfg.synth)?),
        DataSource::Csv(p) => {
            let t = load_csv(p).with_context(|| format!("loading {}", p.display()))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (stem, t)
        }
    };
    let table = if cfg.normalize {
        let train = cfg.split.ranges(table.len())?[0].clone();
        Normalizer::fit(&table, train)?.normalize_table(&table)?
    } else {
        table
    };
    let windows = make_windows(&table, cfg.context, cfg.horizon, cfg.stride, cfg.split)?;
    Ok((name, windows))
}

fn checkpoint_path(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(default))
}

fn load_backbone(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = checkpoint_path(cfg, PRETRAINED);
    let model = load_compatible::<f32>(&path, &cfg.backbone).with_context(|| format!("loading {}", path.display()))?;
    if model.mode.multiscale_path() {
        bail!("{} holds a {} model; a backbone checkpoint is required", path.display(), model.mode);
    }
    Ok(model)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_data(cfg)?;
    let tc = cfg.train_config(PRETRAIN_LR);
    let (params, outcome) = pretrain_model(&cfg.backbone, &data.train, &data.val, &tc)?;
    log::info!("pretrain: val {:.6} -> {:.6}", outcome.initial_val, outcome.best_val);
    let model = Model::from_parts(cfg.backbone, Mode::Full, MsftConfig::default(), params)?;
    let ckpt = cfg.out.join(PRETRAINED);
    save_checkpoint(&ckpt, &model, DType::F32)?;
    save_log(&cfg.out, "pretrain_log.csv", &outcome)?;
    save(&cfg.out, "pretrain_summary.csv", &csv_bytes(&summary_rows("pretrain", Mode::Full, &outcome))?)?;
    println!("pretrained: best val {} -> {}", fmt(outcome.best_val), ckpt.display());
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_data(cfg)?;
    let base = load_backbone(cfg)?;
    let tc = cfg.train_config(cfg.mode.default_lr());
    let (model, outcome) = finetune_model(&base.params, &cfg.backbone, cfg.mode, cfg.msft, &data.train, &data.val, &tc)?;
    log::info!("finetune {}: val {:.6} -> {:.6}", cfg.mode, outcome.initial_val, outcome.best_val);
    let ckpt = cfg.out.join(finetuned_name(cfg.mode));
    save_checkpoint(&ckpt, &model, DType::F32)?;
    save_log(&cfg.out, &format!("train_log_{}.csv", cfg.mode), &outcome)?;
    save(
        &cfg.out,
        &format!("finetune_summary_{}.csv", cfg.mode),
        &csv_bytes(&summary_rows("finetune", cfg.mode, &outcome))?,
    )?;
    println!("finetuned {}: best val {} -> {}", cfg.mode, fmt(outcome.best_val), ckpt.display());
    Ok(())
}

/// The model `evaluate` scores: the finetuned checkpoint of the configured
/// mode, or the pretrained backbone for zero-shot.
pub fn load_for_mode(cfg: &RunConfig) -> Result<Model<f32>> {
    let default = if cfg.mode == Mode::ZeroShot { PRETRAINED.to_string() } else { finetuned_name(cfg.mode) };
    let path = checkpoint_path(cfg, &default);
    let model = load_compatible::<f32>(&path, &cfg.backbone).with_context(|| format!("loading {}", path.display()))?;
    if model.mode == cfg.mode {
        return Ok(model);
    }
    if cfg.mode == Mode::ZeroShot && !model.mode.multiscale_path() {
        return Ok(Model::from_parts(model.backbone, Mode::ZeroShot, model.msft, model.params)?);
    }
    bail!("{} holds a {} model but mode is {}", path.display(), model.mode, cfg.mode)
}

pub const METRICS_PREFIX: [&str; 6] = ["mode", "dataset", "context", "horizon", "windows", "val_loss"];

pub fn metrics_rows(
    mode: Mode,
    dataset: &str,
    cfg: &RunConfig,
    val_loss: f64,
    report: &MetricReport,
    weights: &[f64],
) -> Vec<Vec<String>> {
    let mut header: Vec<String> = METRICS_PREFIX.iter().map(|s| s.to_string()).collect();
    header.extend(MetricReport::HEADER.iter().map(|s| s.to_string()));
    header.extend((0..weights.len()).map(|i| format!("w{i}")));
    let mut row = vec![
        mode.to_string(),
        dataset.to_string(),
        cfg.context.to_string(),
        cfg.horizon.to_string(),
        report.windows.to_string(),
        fmt(val_loss),
    ];
    row.extend(report.values().iter().map(|&v| fmt(v)));
    row.extend(weights.iter().map(|&w| fmt(w)));
    vec![header, row]
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (dataset, data) = load_data(cfg)?;
    let model = load_for_mode(cfg)?;
    let val = data.val.subsample(cfg.val_windows);
    let val_loss = validation_loss(&model, &val, cfg.eval_batch)?;
    let test = data.test.subsample(cfg.test_windows);
    let report = eval_metrics(&model, &test, cfg.seasonality, cfg.eval_batch)?;
    let weights = model.mixing_weights()?;
    let rows = metrics_rows(cfg.mode, &dataset, cfg, val_loss, &report, &weights);
    let path = save(&cfg.out, &format!("metrics_{}.csv", cfg.mode), &csv_bytes(&rows)?)?;
    println!("{}: val {} test mse {} -> {}", cfg.mode, fmt(val_loss), fmt(report.mse), path.display());
    Ok(())
}

/// Max absolute difference between the forecasts of two models.
fn forecast_diff(a: &Model<f32>, b: &Model<f32>, contexts: &[Vec<f32>], horizon: usize) -> Result<f64> {
    let c: Vec<&[f32]> = contexts.iter().map(Vec::as_slice).collect();
    let pa = a.predict(&c, horizon)?;
    let pb = b.predict(&c, horizon)?;
    Ok(pa.max_abs_diff(&pb).context("forecast shapes differ")?)
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (_, mut data) = load_data(cfg)?;
    data.test = data.test.subsample(cfg.test_windows);
    let base = load_backbone(cfg)?;
    let tc = cfg.train_config(Mode::Msft.default_lr());
    let mut rows = ablation_run(&base.params, &cfg.backbone, cfg.msft, &[], &data, &tc, cfg.seasonality)?;
    rows.extend(ablation_run(
        &base.params,
        &cfg.backbone,
        cfg.msft,
        &cfg.toggles,
        &data,
        &tc,
        cfg.seasonality,
    )?);
    let probe: Vec<Vec<f32>> = (0..data.test.len().min(8))
        .map(|i| data.test.context(i).iter().map(|&v| v as f32).collect())
        .collect();
    let mut out = vec![{
        let mut h = vec!["config".to_string()];
        h.extend(MetricReport::HEADER.iter().map(|s| s.to_string()));
        h.push("forecast_diff".into());
        h
    }];
    for r in &rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.report.values().iter().map(|&v| fmt(v)));
        rec.push(fmt(forecast_diff(&rows[0].model, &r.model, &probe, cfg.horizon)?));
        out.push(rec);
    }
    let path = save(&cfg.out, "ablation.csv", &csv_bytes(&out)?)?;
    println!("ablation: {} configurations -> {}", rows.len(), path.display());
    Ok(())
}

pub fn export_attn(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_data(cfg)?;
    ensure!(
        cfg.window < data.test.len(),
        "window {} out of range for {} test windows",
        cfg.window,
        data.test.len()
    );
    let path = checkpoint_path(cfg, PRETRAINED);
    let loaded = load_compatible::<f32>(&path, &cfg.backbone).with_context(|| format!("loading {}", path.display()))?;
    let model = if loaded.mode == Mode::Msft {
        loaded
    } else if loaded.mode.multiscale_path() {
        bail!("{} holds a {} model; need a backbone or msft checkpoint", path.display(), loaded.mode);
    } else {
        Model::from_pretrained(&loaded.params, cfg.backbone, Mode::Msft, cfg.msft, cfg.seed)?
    };
    let context: Vec<f32> = data.test.context(cfg.window).iter().map(|&v| v as f32).collect();
    let mut summary = vec![[
        "attention",
        "layer",
        "head",
        "tokens",
        "cross_scale_mass",
        "max_row_sum_error",
        "on_diagonal",
        "off_diagonal",
        "ratio",
        "file",
    ]
    .map(String::from)
    .to_vec()];
    for &mode in &cfg.attn_modes {
        let mcfg = MsftConfig {
            attention: mode,
            ..model.msft
        };
        let hm = export_attention(&model.params, &cfg.backbone, &mcfg, &context, cfg.horizon, cfg.layer, cfg.head)?;
        let file = hm.save(&cfg.out, &cfg.run)?;
        let dm = hm.diagonal_mass();
        summary.push(vec![
            mode.to_string(),
            cfg.layer.to_string(),
            cfg.head.to_string(),
            hm.probs.len().to_string(),
            fmt(hm.cross_scale_mass()),
            fmt(hm.max_row_sum_error()),
            fmt(dm.on_diagonal),
            fmt(dm.off_diagonal),
            fmt(dm.ratio),
            file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        ]);
    }
    let path = save(&cfg.out, &format!("{}_attention_summary.csv", cfg.run), &csv_bytes(&summary)?)?;
    println!("attention: {} heatmaps -> {}", cfg.attn_modes.len(), path.display());
    Ok(())
}

pub fn diagnose(cfg: &RunConfig) -> Result<()> {
    let (_, data) = load_data(cfg)?;
    let path = checkpoint_path(cfg, PRETRAINED);
    let model = load_compatible::<f32>(&path, &cfg.backbone).with_context(|| format!("loading {}", path.display()))?;
    let windows = data.test.subsample(cfg.diag_windows);
    let layer = cfg.diag_layer.unwrap_or(cfg.backbone.layers - 1);
    let triplets = collect_triplets(&model.params, &cfg.backbone, &windows, cfg.msft.spec()?, layer)?;
    let mut buf = Vec::new();
    write_triplets(&mut buf, &triplets)?;
    save(&cfg.out, "triplets.csv", &buf)?;
    let r = confounder_report(&triplets)?;
    let rows = vec![
        ["n", "raw", "raw_p", "partial", "partial_p"].map(String::from).to_vec(),
        vec![r.n.to_string(), fmt(r.raw), fmt(r.raw_p), fmt(r.partial), fmt(r.partial_p)],
    ];
    let out = save(&cfg.out, "confounder.csv", &csv_bytes(&rows)?)?;
    println!("diagnose: raw {} partial {} (n={}) -> {}", fmt(r.raw), fmt(r.partial), r.n, out.display());
    Ok(())
}
