use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup from 0 to `peak`, then cosine decay to `min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        lr_schedule(t, self)
    }
}

pub fn lr_schedule(t: u64, s: &LrSchedule) -> f64 {
    if t < s.warmup_steps {
        return s.peak * t as f64 / s.warmup_steps as f64;
    }
    if t >= s.total_steps || s.total_steps == s.warmup_steps {
        return if t >= s.total_steps { s.min } else { s.peak };
    }
    let progress = (t - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.min + 0.5 * (s.peak - s.min) * (1.0 + (PI * progress).cos())
}

/// Biases and layer-norm scales are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("norm_scale"))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update from the gradients stored on `params`; a parameter that
    /// received no gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Step(format!(
                "optimizer tracks {} tensors but {} were given",
                self.m.len(),
                params.len()
            )));
        }
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if let Some(i) = g.as_ref().and_then(|g| g.iter().position(|v| !v.is_finite())) {
                return Err(Error::Step(format!("non-finite gradient in '{name}' at index {i}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, ((name, p), g)) in params.iter().zip(&grads).enumerate() {
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.data_mut()?;
            for i in 0..data.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] -= lr * update + lr * wd * data[i];
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[(String, Tensor)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, p) in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.into_iter().map(|v| v * s).collect());
            }
        }
    }
    norm
}
