use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-3,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0;
        if !ok || ![self.lr, self.eps, self.weight_decay].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers and step count of one optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Every parameter must carry a gradient.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    for (name, _) in params.iter() {
        if params.grad(name).is_none() {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let grads: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(n, _)| (n.to_string(), params.grad(n).map(|g| g.data().to_vec()).unwrap_or_default()))
        .collect();
    for (name, g) in grads {
        let w = params.get_mut(&name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, g), m), v) in w.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= c.lr * c.weight_decay * *w;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
    }
    Ok(())
}
