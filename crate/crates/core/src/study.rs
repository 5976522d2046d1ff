//! Seeded synthetic finetuning study: pretrain a backbone on one
//! two-sinusoid corpus, then finetune every mode on a corpus with shifted
//! periods and amplitudes and compare test MSE.

use std::collections::BTreeMap;

use crate::backbone::BackboneConfig;
use crate::data::{make_windows, synth_series, Normalizer, SplitSpec, SplitWindows, SynthSpec};
use crate::error::{Error, Result};
use crate::msft::MsftConfig;
use crate::params::ParamStore;
use crate::training::{evaluate, finetune, pretrain, MetricReport, Mode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub backbone: BackboneConfig,
    pub context_len: usize,
    pub horizon_len: usize,
    pub pretrain_series: SynthSpec,
    pub finetune_series: SynthSpec,
    pub pretrain: TrainConfig,
    /// Per-mode settings; the seed is replaced by each study seed.
    pub finetune: TrainConfig,
    pub msft: MsftConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Test windows are subsampled to at most this many.
    pub test_windows: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            context_len: 96,
            horizon_len: 96,
            pretrain_series: SynthSpec::default(),
            finetune_series: SynthSpec {
                components: vec![(12.0, 1.5, 0.7), (48.0, 1.0, 1.9)],
                noise: 0.1,
                len: 4000,
                seed: 1,
            },
            pretrain: TrainConfig {
                optim: crate::training::AdamW::new(1e-3),
                max_epochs: 10,
                steps_per_epoch: 200,
                patience: 10,
                val_windows: 64,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                max_epochs: 8,
                steps_per_epoch: 50,
                patience: 3,
                val_windows: 64,
                ..TrainConfig::default()
            },
            msft: MsftConfig::default(),
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            test_windows: 256,
        }
    }
}

/// Normalized split windows of a synthetic series.
pub fn prepare_windows(spec: &SynthSpec, context_len: usize, horizon_len: usize) -> Result<SplitWindows> {
    let raw = synth_series(spec)?;
    let split = SplitSpec::default();
    let train = split.ranges(raw.len())?[0].clone();
    let table = Normalizer::fit(&raw, train)?.normalize_table(&raw)?;
    make_windows(&table, context_len, horizon_len, 1, split)
}

#[derive(Debug, Clone)]
pub struct StudyRun {
    pub mode: Mode,
    pub seed: u64,
    pub report: MetricReport,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub pretrained: ParamStore<f32>,
    pub pretrain_log: TrainOutcome,
    pub runs: Vec<StudyRun>,
}

impl StudyResult {
    pub fn mse_by_mode(&self) -> BTreeMap<Mode, Vec<f64>> {
        let mut out: BTreeMap<Mode, Vec<f64>> = BTreeMap::new();
        for r in &self.runs {
            out.entry(r.mode).or_default().push(r.report.mse);
        }
        out
    }

    pub fn median_mse(&self, mode: Mode) -> Result<f64> {
        let mut v = self
            .mse_by_mode()
            .remove(&mode)
            .ok_or_else(|| Error::Contract(format!("no runs for mode {mode}")))?;
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let corpus = prepare_windows(&cfg.pretrain_series, cfg.context_len, cfg.horizon_len)?;
    let (pretrained, pretrain_log) = pretrain(&cfg.backbone, &corpus.train, &corpus.val, &cfg.pretrain)?;
    log::info!(
        "pretrained: val {:.4} -> {:.4}",
        pretrain_log.initial_val,
        pretrain_log.best_val
    );
    let target = prepare_windows(&cfg.finetune_series, cfg.context_len, cfg.horizon_len)?;
    let test = target.test.subsample(cfg.test_windows);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            let tc = TrainConfig {
                seed,
                optim: crate::training::AdamW {
                    lr: mode.default_lr(),
                    ..cfg.finetune.optim
                },
                ..cfg.finetune
            };
            let (model, outcome) = finetune(&pretrained, &cfg.backbone, mode, cfg.msft, &target.train, &target.val, &tc)?;
            let report = evaluate(&model, &test, 1, tc.eval_batch)?;
            log::info!("seed {seed} {mode}: test mse {:.5} (best epoch {})", report.mse, outcome.best_epoch);
            runs.push(StudyRun {
                mode,
                seed,
                report,
                outcome,
            });
        }
    }
    Ok(StudyResult {
        pretrained,
        pretrain_log,
        runs,
    })
}
