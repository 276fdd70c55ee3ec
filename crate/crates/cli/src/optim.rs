//! Adam with decoupled weight decay, global-norm clipping and a warmup plus
//! cosine learning-rate schedule.

use std::f64::consts::PI;

use fit_core::nn::ParamStore;

use crate::config::OptimizerConfig;

/// Learning rate for the update with zero-based index `step` out of `total`.
pub fn learning_rate(cfg: &OptimizerConfig, step: u64, total: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, cfg: &OptimizerConfig) -> f64 {
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in store.get_mut(id).value.iter_mut().enumerate() {
                let g = g[k] * clip;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let step = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
                *p -= lr * (step + cfg.weight_decay * *p);
            }
        }
        norm
    }
}
