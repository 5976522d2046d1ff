//! AdamW with decoupled weight decay.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Moments for the trainable parameters only, kept in `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &ParamStore<T>, trainable: &BTreeSet<String>) -> Result<Self> {
        let mut m = BTreeMap::new();
        for name in trainable {
            m.insert(name.clone(), vec![0.0; params.get(name)?.len()]);
        }
        Ok(Self {
            step: 0,
            v: m.clone(),
            m,
        })
    }
}

/// One AdamW update of every parameter that has optimizer state. A missing
/// gradient counts as zero. Passing a gradient for a parameter without state
/// (a frozen one) is a programming error and panics.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState,
    opt: &AdamW,
) -> Result<()> {
    for name in grads.keys() {
        assert!(state.m.contains_key(name), "attempt to update frozen parameter {name}");
    }
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("moments share keys");
        let p = params.get_mut(name)?;
        let g = grads.get(name).map(Tensor::data);
        if g.is_some_and(|g| g.len() != p.len()) {
            return Err(Error::Contract(format!("gradient of {name} has the wrong size")));
        }
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i].as_f64());
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let next = x.as_f64() * decay - opt.lr * mh / (vh.sqrt() + opt.eps);
            *x = T::of(next);
        }
    }
    Ok(())
}
