use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// One AdamW update of `w` in place, with bias correction for step `t >= 1`
/// and weight decay decoupled from the gradient moments.
pub fn adamw_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamWConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        w[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
    }
}

/// AdamW with per-parameter moment buffers keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies `grads` to the trainable parameters of `state`. Gradients
    /// addressed to frozen parameters are ignored.
    pub fn step(&mut self, state: &mut ModelState, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of '{id}'")));
            }
        }
        self.step += 1;
        for (id, g) in grads {
            let p = state.require(id)?;
            if !p.trainable {
                continue;
            }
            g.expect_shape("AdamW::step", p.value.shape())?;
            let shape = p.value.shape();
            let (m, v) = self.moments.entry(id.clone()).or_insert_with(|| (Tensor::zeros(shape), Tensor::zeros(shape)));
            let p = state.get_mut(id).expect("checked above");
            adamw_update(p.value.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, lr, &self.cfg);
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at epoch 0 to `lr_min` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} out of range for {epochs} epochs")));
    }
    if epoch == 0 {
        return Ok(lr0);
    }
    if epoch == epochs - 1 {
        return Ok(lr_min);
    }
    let phase = PI * epoch as f64 / (epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}
