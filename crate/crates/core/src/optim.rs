//! Decoupled-weight-decay adaptive-moment optimizer with a linear warm-up,
//! plus global gradient-norm clipping.

use crate::model::Model;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warm-up over this many steps before the constant rate.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 10,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, model: &Model) -> Self {
        let m = model.zero_grads();
        let v = model.zero_grads();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.lr;
        }
        let warm = ((step as f64) / (self.cfg.warmup_steps as f64)).min(1.0);
        self.cfg.lr * warm
    }

    /// Apply one update from parameter-aligned gradients; bumps the model's
    /// weight version.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), model.num_params());
        self.step += 1;
        let lr = self.lr_at(self.step);
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            let w = model.param_data_mut(i);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (vh.sqrt() + eps) + wd * w[j]);
            }
        }
        model.bump_version();
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
