//! Adam with decoupled weight decay and two learning-rate groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGroup, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Per-parameter first and second moments and update count. Frozen
    /// parameters keep empty slots.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = |trainable: bool, t: &Tensor| if trainable { Tensor::zeros(t.shape()) } else { Tensor::zeros(&[0]) };
        AdamW {
            config,
            m: store.iter().map(|(_, p)| zeros(p.trainable, &p.value)).collect(),
            v: store.iter().map(|(_, p)| zeros(p.trainable, &p.value)).collect(),
            t: vec![0; store.len()],
        }
    }

    /// Applies one update from the gradients held in `store`.
    ///
    /// Parameters whose gradient is exactly zero this step are skipped
    /// entirely (no moment update, no decay), so a module that took no part
    /// in the loss is left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f32) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid("optimizer state does not match parameters".into()));
        }
        let c = self.config;
        for (id, p) in store.iter_mut() {
            let i = id.index();
            if !p.trainable || p.grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let lr = lr(p.group);
            // biases and norm gains are not decayed
            let decay = if p.value.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}
