use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_interval` updates.
    pub decay: f64,
    pub decay_interval: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, decay: 0.5, decay_interval: 10_000 }
    }
}

/// Adam with bias correction and a step-decay schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Learning rate used by update number `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        let k = (t.saturating_sub(1) / self.cfg.decay_interval.max(1) as u64) as i32;
        self.cfg.lr * self.cfg.decay.powi(k)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at update {}", self.t + 1)));
            }
        }
        self.t += 1;
        let t = self.t;
        let lr = self.lr_at(t);
        let AdamConfig { beta1: b1, beta2: b2, eps, .. } = self.cfg;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (name, p) in store.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient of {name} has {} entries, parameter {}", g.len(), p.len())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
