//! Heavy-ball SGD with coupled weight decay and a step learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Velocity buffers, one per parameter, created lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    /// One update at learning rate `lr`:
    /// `g' = g + wd w; v = mu v + g'; w -= lr v`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        for (name, w) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != w.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient {:?} for `{name}` with shape {:?}", g.shape(), w.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let gd = gi + weight_decay * *wi;
                *vi = momentum * *vi + gd;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SgdState::step`] at the configured rate.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, state: &mut SgdState) -> Result<()> {
    let lr = state.config.lr;
    state.step(params, grads, lr)
}

/// Multiplies the base rate by `factor` once per milestone epoch passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            milestones: vec![20, 28],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    /// Rate for zero-based `epoch`; milestone `m` applies from epoch `m` on.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let n = self.milestones.iter().filter(|&&m| epoch >= m).count();
        base * self.factor.powi(n as i32)
    }
}
