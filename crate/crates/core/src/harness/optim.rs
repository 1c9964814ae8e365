//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`: `p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps))`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name:?}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("{name}: gradient {:?} vs {:?}", g.shape(), p.shape())));
            }
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (c.weight_decay * *pi + mhat / (vhat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}
