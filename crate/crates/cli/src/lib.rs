//! Command-line driver: run configuration parsing and subcommands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "msft", version, about = "Pretrain, finetune and inspect the toy multi-scale forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-reconstruction pretraining of a fresh backbone.
    Pretrain(Overrides),
    /// Finetune a pretrained backbone in one mode.
    Finetune(Overrides),
    /// Validation loss and test metrics of a checkpoint.
    Evaluate(Overrides),
    /// Run the MSFT ablation grid.
    Ablate(Overrides),
    /// Export attention heatmaps of one layer and head.
    ExportAttn(Overrides),
    /// Scale/ACF/embedding-norm triplets and their partial correlation.
    Diagnose(Overrides),
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// key=value run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::ExportAttn(_) => "export-attn",
            Command::Diagnose(_) => "diagnose",
        }
    }

    fn overrides(&self) -> &Overrides {
        match self {
            Command::Pretrain(o)
            | Command::Finetune(o)
            | Command::Evaluate(o)
            | Command::Ablate(o)
            | Command::ExportAttn(o)
            | Command::Diagnose(o) => o,
        }
    }
}

impl Overrides {
    /// The config file (or defaults) with flag overrides applied, validated.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError {
                key: kv.clone(),
                message: "--set expects key=value".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags = [("mode", &self.mode), ("k", &self.k), ("seed", &self.seed), ("lr", &self.lr)];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolves the configuration, echoes it into the output directory and runs
/// the subcommand. Configuration problems surface as [`ConfigError`].
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.command.overrides().resolve()?;
    std::fs::create_dir_all(&cfg.out)?;
    msft_core::checkpoint::write_atomic(
        &cfg.out.join(format!("config_{}.txt", cli.command.name())),
        cfg.to_text().as_bytes(),
    )?;
    match &cli.command {
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::Finetune(_) => commands::finetune(&cfg),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
        Command::ExportAttn(_) => commands::export_attn(&cfg),
        Command::Diagnose(_) => commands::diagnose(&cfg),
    }
}
