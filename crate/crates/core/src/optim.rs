//! Adam with decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per step, for every tensor marked for decay `θ ← θ(1 − lr·wd)`, then the
/// bias-corrected moment update `θ ← θ − lr·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    steps: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| alloc::vec![F::zero(); p.value.len()]).collect();
        AdamW { cfg, steps: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. Nothing is changed
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
        self.steps += 1;
        let c = &self.cfg;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - libm::pow(c.beta1, self.steps as f64));
        let bc2 = F::of(1.0 - libm::pow(c.beta2, self.steps as f64));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        let decay = F::one() - F::of(c.lr * c.weight_decay);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let apply_decay = p.decay && c.weight_decay != 0.0;
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                if apply_decay {
                    value[i] = value[i] * decay;
                }
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] = value[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
