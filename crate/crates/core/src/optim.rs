//! Adam with optional global-norm clipping and a step-halving schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Halve the learning rate after every this many epochs.
    #[serde(default)]
    pub halve_every: Option<usize>,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: beta1(), beta2: beta2(), eps: eps(), clip_norm: None, halve_every: None }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.halve_every {
            Some(k) if k > 0 => self.lr * 0.5f64.powi((epoch / k) as i32),
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(Error::invalid(format!("invalid Adam settings {cfg:?}")));
        }
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Ok(Adam { cfg, step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<f64> {
        let gs = grads.params();
        if gs.len() != store.len() {
            return Err(Error::invalid("gradients were computed against a different store"));
        }
        let trainable: Vec<bool> = store.entries().iter().map(|e| e.trainable).collect();
        let norm = gs
            .iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .flat_map(|(g, _)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericDomain { op: "adam" });
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for (j, &g) in gs[i].data().iter().enumerate() {
                let g = g * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }
}
