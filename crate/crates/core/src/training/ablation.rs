//! Component ablations of the multi-scale finetuning mode.

use std::io::Write;

use crate::backbone::BackboneConfig;
use crate::data::SplitWindows;
use crate::error::Result;
use crate::msft::{AttentionMode, Mixing, MsftConfig, Sharing};
use crate::params::ParamStore;
use crate::training::metrics::MetricReport;
use crate::training::model::{Mode, Model};
use crate::training::trainer::{csv_err, evaluate, finetune, fmt_f64, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    AdaptersFrozen,
    AdaptersShared,
    LoraFrozen,
    LoraShared,
    NoAggregators,
    NoC2f,
    NoF2c,
    NaiveAttention,
    NoMixing,
    AverageMixing,
}

str_enum!(Toggle {
    AdaptersFrozen => "adapters_frozen",
    AdaptersShared => "adapters_shared",
    LoraFrozen => "lora_frozen",
    LoraShared => "lora_shared",
    NoAggregators => "no_aggregators",
    NoC2f => "no_c2f",
    NoF2c => "no_f2c",
    NaiveAttention => "naive_attention",
    NoMixing => "no_mixing",
    AverageMixing => "average_mixing",
});

impl Toggle {
    /// The ten standard ablations, in order.
    pub const GRID: [Toggle; 10] = [
        Toggle::AdaptersFrozen,
        Toggle::AdaptersShared,
        Toggle::LoraFrozen,
        Toggle::LoraShared,
        Toggle::NoAggregators,
        Toggle::NoC2f,
        Toggle::NoF2c,
        Toggle::NaiveAttention,
        Toggle::NoMixing,
        Toggle::AverageMixing,
    ];

    pub fn apply(self, base: MsftConfig) -> MsftConfig {
        let mut c = base;
        match self {
            Toggle::AdaptersFrozen => c.adapters = Sharing::Frozen,
            Toggle::AdaptersShared => c.adapters = Sharing::Shared,
            Toggle::LoraFrozen => c.lora = Sharing::Frozen,
            Toggle::LoraShared => c.lora = Sharing::Shared,
            Toggle::NoAggregators => (c.c2f, c.f2c) = (false, false),
            Toggle::NoC2f => c.c2f = false,
            Toggle::NoF2c => c.f2c = false,
            // Plain attention over the concatenated scales, with no
            // cross-scale modules at all.
            Toggle::NaiveAttention => {
                c.attention = AttentionMode::Naive;
                (c.c2f, c.f2c) = (false, false);
            }
            Toggle::NoMixing => c.mixing = Mixing::ScaleZero,
            Toggle::AverageMixing => c.mixing = Mixing::Average,
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: MsftConfig,
    pub report: MetricReport,
    pub model: Model<f32>,
}

/// One finetune and test evaluation per toggle (a single unmodified run
/// when `toggles` is empty), all with the same seed.
pub fn ablation_run(
    pretrained: &ParamStore<f32>,
    bcfg: &BackboneConfig,
    base: MsftConfig,
    toggles: &[Toggle],
    data: &SplitWindows,
    cfg: &TrainConfig,
    seasonality: usize,
) -> Result<Vec<AblationRow>> {
    let configs: Vec<(String, MsftConfig)> = if toggles.is_empty() {
        vec![("msft".into(), base)]
    } else {
        toggles.iter().map(|t| (t.to_string(), t.apply(base))).collect()
    };
    configs
        .into_iter()
        .map(|(label, config)| {
            log::info!("ablation {label}");
            let (model, _) = finetune(pretrained, bcfg, Mode::Msft, config, &data.train, &data.val, cfg)?;
            let report = evaluate(&model, &data.test, seasonality, cfg.eval_batch)?;
            Ok(AblationRow {
                label,
                config,
                report,
                model,
            })
        })
        .collect()
}

pub fn write_ablation_csv(out: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["config"];
    header.extend(MetricReport::HEADER);
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.report.values().iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
