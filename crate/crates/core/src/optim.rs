//! AdamW with bias-corrected moments and decoupled weight decay. Moment
//! buffers exist only for registered (trainable) parameters.

use std::collections::BTreeMap;

use occ_tensor::{ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Registers every trainable parameter of `store`.
    pub fn for_trainable(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let mut opt = Self::new(cfg);
        for (id, p) in store.iter() {
            if !p.frozen {
                opt.moments.insert(id, (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
        }
        opt
    }

    pub fn register(&mut self, store: &ParamStore, id: ParamId) -> Result<()> {
        let p = store.get(id);
        if p.frozen {
            return Err(CoreError::Config(format!("refusing to optimise frozen parameter {}", p.name)));
        }
        self.moments
            .insert(id, (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
        Ok(())
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    pub fn num_tracked(&self) -> usize {
        self.moments.len()
    }

    /// One update. Gradients for unregistered parameters are ignored;
    /// registered parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (id, g) in grads {
            if self.moments.contains_key(id) && !g.is_finite() {
                return Err(CoreError::Config(format!(
                    "non-finite gradient for parameter {}",
                    store.get(*id).name
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, (m, v)) in self.moments.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let theta = store.value_mut(*id)?;
            let (td, md, vd, gd) = (theta.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..td.len() {
                td[i] -= lr * weight_decay * td[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                td[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
