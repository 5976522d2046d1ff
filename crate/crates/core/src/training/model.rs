//! A backbone plus whatever finetuning modules a mode adds, with its
//! trainable partition.

use std::collections::BTreeSet;

use crate::backbone::{backbone_forward, mse, BackboneConfig};
use crate::error::{Error, Result};
use crate::msft::{
    init_msft_params, msft_forward, msft_loss, msft_predict, msft_trainable, scale_targets, Mixing, MsftConfig,
    MIX_THETA,
};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;

/// Finetuning mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    ZeroShot,
    Full,
    LinearProbe,
    Lora,
    Msft,
}

str_enum!(Mode {
    ZeroShot => "zero_shot",
    Full => "full",
    LinearProbe => "linear_probe",
    Lora => "lora",
    Msft => "msft",
});

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ZeroShot, Mode::Full, Mode::LinearProbe, Mode::Lora, Mode::Msft];

    pub fn default_lr(self) -> f64 {
        match self {
            Mode::Full => 5e-6,
            Mode::LinearProbe => 5e-4,
            Mode::ZeroShot | Mode::Lora | Mode::Msft => 5e-5,
        }
    }

    pub fn multiscale_path(self) -> bool {
        matches!(self, Mode::Lora | Mode::Msft)
    }
}

pub const HEAD_PARAMS: [&str; 2] = ["out_proj.weight", "out_proj.bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: BackboneConfig,
    pub mode: Mode,
    /// Module layout for the `lora` and `msft` modes; ignored otherwise.
    pub msft: MsftConfig,
    pub params: ParamStore<T>,
    pub trainable: BTreeSet<String>,
}

impl<T: Scalar> Model<T> {
    /// Wraps pretrained backbone weights for `mode`. `msft` is used in msft
    /// mode; lora mode always uses the single-scale LoRA layout.
    pub fn from_pretrained(
        pretrained: &ParamStore<T>,
        backbone: BackboneConfig,
        mode: Mode,
        msft: MsftConfig,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate()?;
        let mut params = pretrained.clone();
        let msft = match mode {
            Mode::Lora => MsftConfig::lora_baseline(backbone.d),
            _ => msft,
        };
        if mode.multiscale_path() {
            let mut rng = Rng::stream(seed, 1);
            params.extend(init_msft_params(&backbone, &msft, &mut rng)?)?;
        }
        Self::from_parts(backbone, mode, msft, params)
    }

    /// A model from complete parameters, with the trainable partition of
    /// `mode`.
    pub fn from_parts(backbone: BackboneConfig, mode: Mode, msft: MsftConfig, params: ParamStore<T>) -> Result<Self> {
        let trainable: BTreeSet<String> = match mode {
            Mode::ZeroShot => BTreeSet::new(),
            Mode::Full => params.names().map(str::to_string).collect(),
            Mode::LinearProbe => HEAD_PARAMS.iter().map(|s| s.to_string()).collect(),
            Mode::Lora => params
                .names()
                .filter(|n| n.starts_with("lora.") || HEAD_PARAMS.contains(n))
                .map(str::to_string)
                .collect(),
            Mode::Msft => msft_trainable(&params, &backbone, &msft),
        };
        for name in &trainable {
            params.get(name)?;
        }
        Ok(Self {
            backbone,
            mode,
            msft,
            params,
            trainable,
        })
    }

    /// Training objective of one batch: MSE of the forecast for the
    /// single-scale modes, the mixed per-scale loss otherwise.
    pub fn loss(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, contexts: &[&[T]], horizons: &[&[T]]) -> Result<Var> {
        let h = horizon_len(horizons)?;
        if self.mode.multiscale_path() {
            let out = msft_forward(g, b, &self.backbone, &self.msft, contexts, h, None)?;
            let targets = scale_targets(horizons, self.msft.spec()?)?;
            msft_loss(g, &out.preds, &targets, out.weights)
        } else {
            let out = backbone_forward(g, b, &self.backbone, contexts, h, None)?;
            let data = horizons.iter().flat_map(|r| r.iter().copied()).collect();
            mse(g, out.pred, Tensor::new(vec![horizons.len(), h], data)?)
        }
    }

    /// `[B, H]` forecasts (mixed across scales where applicable).
    pub fn predict(&self, contexts: &[&[T]], horizon_len: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        if self.mode.multiscale_path() {
            let out = msft_forward(&mut g, &mut b, &self.backbone, &self.msft, contexts, horizon_len, None)?;
            let per_scale = out.preds.iter().map(|&p| g.value(p).clone()).collect();
            let w = g.value(out.weights).data().to_vec();
            Ok(msft_predict(per_scale, w, self.msft.s, horizon_len)?.mixed)
        } else {
            let out = backbone_forward(&mut g, &mut b, &self.backbone, contexts, horizon_len, None)?;
            Ok(g.value(out.pred).clone())
        }
    }

    /// Mixing weights in `f64`, computed from `θ` directly so they sum to
    /// one to double precision; `[1]` for single-scale modes.
    pub fn mixing_weights(&self) -> Result<Vec<f64>> {
        if !self.mode.multiscale_path() {
            return Ok(vec![1.0]);
        }
        let kk = self.msft.k + 1;
        Ok(match self.msft.mixing {
            Mixing::ScaleZero => {
                let mut w = vec![0.0; kk];
                w[0] = 1.0;
                w
            }
            Mixing::Average => vec![1.0 / kk as f64; kk],
            Mixing::Learned => softmax(&self.params.get(MIX_THETA)?.to_f64_vec()),
        })
    }
}

pub fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn horizon_len<T>(horizons: &[&[T]]) -> Result<usize> {
    let h = horizons.first().map(|r| r.len()).ok_or_else(|| Error::Contract("empty batch".into()))?;
    if horizons.iter().any(|r| r.len() != h) {
        return Err(Error::Contract("horizons of a batch differ in length".into()));
    }
    Ok(h)
}
