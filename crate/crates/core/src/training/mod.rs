//! Optimization, finetuning modes, metrics and ablations.

pub mod ablation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use ablation::{ablation_run, write_ablation_csv, AblationRow, Toggle};
pub use metrics::{MetricAccumulator, MetricReport};
pub use model::{Mode, Model};
pub use optim::{adamw_step, AdamW, OptimState};
pub use trainer::{evaluate, finetune, pretrain, train, validation_loss, write_log, EarlyStopState, LogRow, TrainConfig, TrainOutcome};
