//! AdamW with decoupled weight decay, global-norm clipping and the linear
//! warmup / linear decay schedule.

use serde::{Deserialize, Serialize};

use super::linalg::Real;
use super::params::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One parameter tensor together with its gradient and moment buffers.
pub struct Slot<'a, T> {
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub m: &'a mut Tensor<T>,
    pub v: &'a mut Tensor<T>,
    pub decay: bool,
}

/// Applies one update with bias correction for step `t` (1-based).
pub fn adamw_update<T: Real>(slots: Vec<Slot<'_, T>>, lr: f64, t: u64, hp: &AdamWConfig) {
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - hp.beta1), T::c(1.0 - hp.beta2));
    let c1 = T::c(1.0 / (1.0 - hp.beta1.powi(t as i32)));
    let c2 = T::c(1.0 / (1.0 - hp.beta2.powi(t as i32)));
    let eps = T::c(hp.eps);
    let step = T::c(lr);
    let shrink = T::c(lr * hp.weight_decay);
    for s in slots {
        let p = &mut s.param.data;
        for i in 0..p.len() {
            let g = s.grad.data[i];
            let m = b1 * s.m.data[i] + one_b1 * g;
            let v = b2 * s.v.data[i] + one_b2 * g * g;
            s.m.data[i] = m;
            s.v.data[i] = v;
            let mut x = p[i];
            if s.decay {
                x -= shrink * x;
            }
            p[i] = x - step * (m * c1) / ((v * c2).sqrt() + eps);
        }
    }
}

pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| g.f64() * g.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&Tensor<T>> = grads.iter().map(|t| &**t).collect();
        global_norm(&views)
    };
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for t in grads.iter_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Linear warmup over `warmup_frac` of `total` steps, then linear decay to
/// zero. `step` is 0-based.
pub fn lr_at(step: u64, total: u64, warmup_frac: f64, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let warmup = (warmup_frac * total as f64).round() as u64;
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        peak * ((total.saturating_sub(step)) as f64 / rest).clamp(0.0, 1.0)
    }
}
