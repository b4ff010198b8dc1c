use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0012,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        Ok(AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Multiplies the learning rate by `factor`.
    pub fn anneal(&mut self, factor: f64) {
        self.config.lr *= factor;
    }

    /// One update. Parameters without a gradient still decay their moments,
    /// matching a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        for slot in 0..params.len() {
            if let Some(g) = grads.slot(slot) {
                if g.shape() != params.by_slot(slot).shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for `{}` has shape {:?}, parameter is {:?}",
                        params.name(slot),
                        g.shape(),
                        params.by_slot(slot).shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("gradient of `{}`", params.name(slot))));
                }
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);

        for slot in 0..params.len() {
            let g = grads.slot(slot);
            if g.is_none() && self.m[slot].is_none() {
                continue;
            }
            let p = params.by_slot_mut(slot);
            let m = self.m[slot].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[slot].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
