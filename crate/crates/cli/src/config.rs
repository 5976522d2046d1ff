//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msft_core::backbone::BackboneConfig;
use msft_core::data::{SplitSpec, SynthSpec};
use msft_core::msft::{AttentionMode, Mixing, MsftConfig, Sharing};
use msft_core::training::{AdamW, Mode, Toggle, TrainConfig};

/// A configuration problem; always names the key at fault.
#[derive(Debug, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub synth: SynthSpec,
    pub split: SplitSpec,
    pub normalize: bool,
    pub stride: usize,
    pub context: usize,
    pub horizon: usize,
    pub backbone: BackboneConfig,
    pub msft: MsftConfig,
    pub mode: Mode,
    pub toggles: Vec<Toggle>,
    /// `None` selects the per-command default.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps: usize,
    pub patience: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub eval_batch: usize,
    pub seasonality: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub run: String,
    pub layer: usize,
    pub head: usize,
    pub window: usize,
    pub attn_modes: Vec<AttentionMode>,
    pub diag_windows: usize,
    /// Block summarized by `diagnose`; `None` is the last block.
    pub diag_layer: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: DataSource::Synth,
            synth: SynthSpec::default(),
            split: SplitSpec::default(),
            normalize: true,
            stride: 1,
            context: 96,
            horizon: 96,
            backbone: BackboneConfig::default(),
            msft: MsftConfig::default(),
            mode: Mode::Msft,
            toggles: Toggle::GRID.to_vec(),
            lr: None,
            weight_decay: t.optim.weight_decay,
            beta1: t.optim.beta1,
            beta2: t.optim.beta2,
            adam_eps: t.optim.eps,
            batch_size: t.batch_size,
            epochs: t.max_epochs,
            steps: t.steps_per_epoch,
            patience: t.patience,
            val_windows: t.val_windows,
            test_windows: 256,
            eval_batch: t.eval_batch,
            seasonality: 1,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            run: "run".into(),
            layer: 0,
            head: 0,
            window: 0,
            attn_modes: vec![AttentionMode::InScale, AttentionMode::Naive, AttentionMode::Aligned],
            diag_windows: 64,
            diag_layer: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| ConfigError::new(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::new(key, format!("expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file over the defaults.
    pub fn from_file(path: &Path) -> std::result::Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(line, format!("line {} is not key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::new(k, "given more than once"));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "data" => {
                self.data = if v == "synth" {
                    DataSource::Synth
                } else if v.is_empty() {
                    return Err(ConfigError::new(key, "empty path"));
                } else {
                    DataSource::Csv(PathBuf::from(v))
                }
            }
            "synth_periods" => self.set_components(key, v, 0)?,
            "synth_amplitudes" => self.set_components(key, v, 1)?,
            "synth_phases" => self.set_components(key, v, 2)?,
            "synth_noise" => self.synth.noise = parse(key, v)?,
            "synth_len" => self.synth.len = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "split" => {
                let f: Vec<f64> = parse_list(key, v)?;
                if f.len() != 3 {
                    return Err(ConfigError::new(key, "expected three fractions train,val,test"));
                }
                self.split = SplitSpec {
                    train: f[0],
                    val: f[1],
                    test: f[2],
                };
            }
            "normalize" => self.normalize = parse_bool(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "context" => self.context = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "patch" => self.backbone.patch = parse(key, v)?,
            "d_model" => self.backbone.d = parse(key, v)?,
            "layers" => self.backbone.layers = parse(key, v)?,
            "heads" => self.backbone.heads = parse(key, v)?,
            "ffn_mult" => self.backbone.ffn_mult = parse(key, v)?,
            "k" => self.msft.k = parse(key, v)?,
            "s" => self.msft.s = parse(key, v)?,
            "lora_rank" => self.msft.lora_rank = if v == "auto" { None } else { Some(parse(key, v)?) },
            "lora_alpha" => self.msft.lora_alpha = parse(key, v)?,
            "adapters" => self.msft.adapters = parse::<Sharing>(key, v)?,
            "lora" => self.msft.lora = parse::<Sharing>(key, v)?,
            "c2f" => self.msft.c2f = parse_bool(key, v)?,
            "f2c" => self.msft.f2c = parse_bool(key, v)?,
            "attention" => self.msft.attention = parse::<AttentionMode>(key, v)?,
            "mixing" => self.msft.mixing = parse::<Mixing>(key, v)?,
            "train_mask_token" => self.msft.train_mask_token = parse_bool(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "toggles" => {
                self.toggles = match v {
                    "all" => Toggle::GRID.to_vec(),
                    "none" => Vec::new(),
                    _ => parse_list(key, v)?,
                }
            }
            "lr" => self.lr = if v == "auto" { None } else { Some(parse(key, v)?) },
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_windows" => self.val_windows = parse(key, v)?,
            "test_windows" => self.test_windows = parse(key, v)?,
            "eval_batch" => self.eval_batch = parse(key, v)?,
            "seasonality" => self.seasonality = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "run" => self.run = v.to_string(),
            "layer" => self.layer = parse(key, v)?,
            "head" => self.head = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "attn_modes" => self.attn_modes = parse_list(key, v)?,
            "diag_windows" => self.diag_windows = parse(key, v)?,
            "diag_layer" => self.diag_layer = if v == "last" { None } else { Some(parse(key, v)?) },
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    fn set_components(&mut self, key: &str, v: &str, field: usize) -> Result<()> {
        let xs: Vec<f64> = parse_list(key, v)?;
        if field == 0 {
            self.synth.components.resize(xs.len(), (2.0, 1.0, 0.0));
        } else if xs.len() != self.synth.components.len() {
            return Err(ConfigError::new(
                key,
                format!("{} values for {} synth_periods", xs.len(), self.synth.components.len()),
            ));
        }
        for (c, x) in self.synth.components.iter_mut().zip(xs) {
            match field {
                0 => c.0 = x,
                1 => c.1 = x,
                _ => c.2 = x,
            }
        }
        Ok(())
    }

    /// Cross-key checks, run after file and flag overrides are applied.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context", self.context),
            ("horizon", self.horizon),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("eval_batch", self.eval_batch),
            ("val_windows", self.val_windows),
            ("test_windows", self.test_windows),
            ("seasonality", self.seasonality),
            ("diag_windows", self.diag_windows),
            ("synth_len", self.synth.len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(k, "must be positive"));
            }
        }
        if self.patience == 0 {
            return Err(ConfigError::new("patience", "must be at least 1"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(ConfigError::new("lr", format!("{lr} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ConfigError::new("weight_decay", "must be non-negative"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::new(k, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(ConfigError::new("adam_eps", "must be positive"));
        }
        if self.synth.components.is_empty() {
            return Err(ConfigError::new("synth_periods", "at least one component"));
        }
        if let Some(&(p, _, _)) = self.synth.components.iter().find(|c| !(c.0 >= 2.0)) {
            return Err(ConfigError::new("synth_periods", format!("period {p} must be at least 2")));
        }
        if !(self.synth.noise >= 0.0) {
            return Err(ConfigError::new("synth_noise", "must be non-negative"));
        }
        if self.run.is_empty() || self.run.contains(['/', '\\']) {
            return Err(ConfigError::new("run", "must be a non-empty file-name fragment"));
        }
        self.split.validate().map_err(|e| ConfigError::new("split", e.to_string()))?;
        self.backbone
            .validate()
            .map_err(|e| ConfigError::new("d_model/heads/patch/layers", e.to_string()))?;
        if self.layer >= self.backbone.layers {
            return Err(ConfigError::new("layer", format!("{} of {} layers", self.layer, self.backbone.layers)));
        }
        if let Some(l) = self.diag_layer.filter(|&l| l >= self.backbone.layers) {
            return Err(ConfigError::new("diag_layer", format!("{l} of {} layers", self.backbone.layers)));
        }
        if self.head >= self.backbone.heads {
            return Err(ConfigError::new("head", format!("{} of {} heads", self.head, self.backbone.heads)));
        }
        self.msft.validate(&self.backbone).map_err(|e| ConfigError::new("k/s/lora", e.to_string()))?;
        let min_ctx = self.msft.s.checked_pow(self.msft.k as u32).unwrap_or(usize::MAX);
        if self.context < min_ctx {
            return Err(ConfigError::new(
                "context",
                format!("{} is shorter than s^k = {min_ctx}", self.context),
            ));
        }
        Ok(())
    }

    /// Optimizer settings for `mode`; `default_lr` applies when `lr` is unset.
    pub fn train_config(&self, default_lr: f64) -> TrainConfig {
        TrainConfig {
            optim: AdamW {
                lr: self.lr.unwrap_or(default_lr),
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            steps_per_epoch: self.steps,
            patience: self.patience,
            seed: self.seed,
            val_windows: self.val_windows,
            eval_batch: self.eval_batch,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: &Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let c = &self.synth.components;
        vec![
            (
                "data",
                match &self.data {
                    DataSource::Synth => "synth".into(),
                    DataSource::Csv(p) => p.display().to_string(),
                },
            ),
            ("synth_periods", join(c.iter().map(|x| x.0))),
            ("synth_amplitudes", join(c.iter().map(|x| x.1))),
            ("synth_phases", join(c.iter().map(|x| x.2))),
            ("synth_noise", self.synth.noise.to_string()),
            ("synth_len", self.synth.len.to_string()),
            ("synth_seed", self.synth.seed.to_string()),
            ("split", join([self.split.train, self.split.val, self.split.test])),
            ("normalize", self.normalize.to_string()),
            ("stride", self.stride.to_string()),
            ("context", self.context.to_string()),
            ("horizon", self.horizon.to_string()),
            ("patch", self.backbone.patch.to_string()),
            ("d_model", self.backbone.d.to_string()),
            ("layers", self.backbone.layers.to_string()),
            ("heads", self.backbone.heads.to_string()),
            ("ffn_mult", self.backbone.ffn_mult.to_string()),
            ("k", self.msft.k.to_string()),
            ("s", self.msft.s.to_string()),
            ("lora_rank", self.msft.lora_rank.map_or("auto".into(), |r| r.to_string())),
            ("lora_alpha", self.msft.lora_alpha.to_string()),
            ("adapters", self.msft.adapters.to_string()),
            ("lora", self.msft.lora.to_string()),
            ("c2f", self.msft.c2f.to_string()),
            ("f2c", self.msft.f2c.to_string()),
            ("attention", self.msft.attention.to_string()),
            ("mixing", self.msft.mixing.to_string()),
            ("train_mask_token", self.msft.train_mask_token.to_string()),
            ("mode", self.mode.to_string()),
            ("toggles", if self.toggles.is_empty() { "none".into() } else { join(&self.toggles) }),
            ("lr", opt(&self.lr)),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.to_string()),
            ("patience", self.patience.to_string()),
            ("val_windows", self.val_windows.to_string()),
            ("test_windows", self.test_windows.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("seasonality", self.seasonality.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            (
                "checkpoint",
                self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("run", self.run.clone()),
            ("layer", self.layer.to_string()),
            ("head", self.head.to_string()),
            ("window", self.window.to_string()),
            ("attn_modes", join(&self.attn_modes)),
            ("diag_windows", self.diag_windows.to_string()),
            ("diag_layer", self.diag_layer.map_or("last".into(), |l| l.to_string())),
        ]
    }

    /// The resolved configuration as a config file.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("k", "3").unwrap();
        cfg.set("lr", "0.001").unwrap();
        cfg.set("toggles", "no_c2f,average_mixing").unwrap();
        cfg.set("synth_periods", "12,48").unwrap();
        cfg.set("synth_amplitudes", "1.5,1").unwrap();
        cfg.set("data", "series.csv").unwrap();
        cfg.set("diag_layer", "1").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_repeated_keys_are_named() {
        let e = RunConfig::from_text("foo=1").unwrap_err();
        assert_eq!(e.key, "foo");
        let e = RunConfig::from_text("seed=1\nseed=2").unwrap_err();
        assert_eq!(e.key, "seed");
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::from_text("# note\n\n  context = 64 \n").unwrap();
        assert_eq!(cfg.context, 64);
    }

    #[test]
    fn bad_values_name_the_key() {
        assert_eq!(RunConfig::from_text("mode=bogus").unwrap_err().key, "mode");
        assert_eq!(RunConfig::from_text("c2f=maybe").unwrap_err().key, "c2f");
        assert_eq!(RunConfig::from_text("split=0.5,0.5").unwrap_err().key, "split");
        let mut cfg = RunConfig::default();
        cfg.lr = Some(-1.0);
        assert_eq!(cfg.validate().unwrap_err().key, "lr");
    }

    #[test]
    fn short_context_is_rejected() {
        let cfg = RunConfig::from_text("context=3\nk=2\ns=2").unwrap();
        assert_eq!(cfg.validate().unwrap_err().key, "context");
    }
}
