use std::collections::BTreeMap;

use saap_autodiff::{GradientMap, Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
        }
    }
}

/// AdamW with decoupled weight decay applied to matrices only.
/// Moments are kept in f64.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Global L2 norm of a gradient map.
    pub fn grad_norm<T: Scalar>(grads: &GradientMap<T>) -> f64 {
        grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &GradientMap<T>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let clip = match self.cfg.grad_clip {
            Some(max) => {
                let norm = Self::grad_norm(grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let decay = if p.shape().len() == 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].as_f64() * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                let wi = w.as_f64();
                *w = T::from_f64(wi - lr * (update + decay * wi));
            }
        }
    }
}

/// Linear warmup to `base`, then cosine decay to `base/10` at `total`.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup.min(step)) as f64 / span).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (0.1 + 0.9 * cosine)
}
