use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;
use crate::params::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// (rank >= 2), not to biases or normalization affines.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step<P: Params + ?Sized>(&mut self, params: &mut P, grads: &HashMap<String, Tensor>) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (c.lr, c.beta1, c.beta2, c.eps, c.weight_decay);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let decay = if p.rank() >= 2 { wd } else { 0.0 };
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv as f64;
                *mv = (b1 * *mv as f64 + (1.0 - b1) * gv) as f32;
                *vv = (b2 * *vv as f64 + (1.0 - b2) * gv * gv) as f32;
                let mhat = *mv as f64 / bc1;
                let vhat = *vv as f64 / bc2;
                let update = lr * (mhat / (vhat.sqrt() + eps) + decay * *w as f64);
                *w = (*w as f64 - update) as f32;
            }
        });
    }
}
