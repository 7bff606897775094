//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

/// Decay applies to tensors with more than one row; gains, biases and the
/// contrastive temperature are exempt.
fn decays(name: &str, rows: usize) -> bool {
    rows > 1 && !name.ends_with("log_tau")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` in place, then updates every parameter that has a
    /// gradient. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &mut Gradients) -> f64 {
        let norm = if self.config.grad_clip > 0.0 { grads.clip_global_norm(self.config.grad_clip) } else { grads.global_norm() };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let rows = p.matrix_shape().0;
            let decay = decays(name, rows);
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.data().len()], vec![0.0; g.data().len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                let mut x = *w as f64;
                if decay {
                    x -= c.learning_rate * c.weight_decay * x;
                }
                x -= c.learning_rate * update;
                *w = x as f32;
            }
        }
        norm
    }
}
