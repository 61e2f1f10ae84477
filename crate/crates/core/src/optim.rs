//! AdamW with decoupled weight decay, plus the cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base · ½(1 + cos(π·t/T))`; constant when `total == 0`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub weight_decay: f64,
    /// First and second moment estimates, shaped like the parameters.
    pub m: ModelParams,
    pub v: ModelParams,
    pub steps: u64,
}

impl AdamW {
    pub fn new(like: &ModelParams, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    /// One update at learning rate `lr`. With `clip`, the gradient is first
    /// rescaled to that global L2 norm when it is longer.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, clip: Option<f64>) -> Result<()> {
        params.check_same_structure(grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let gscale = match clip {
            Some(max) => {
                let n = grads
                    .tensors()
                    .iter()
                    .flat_map(|t| t.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        let wd = self.weight_decay;
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            for i in 0..p.len() {
                let gi = g[i] * gscale;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
        Ok(())
    }
}
