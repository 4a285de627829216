//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global norm is at most this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<F = f32> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &Params<F>, config: AdamWConfig) -> Self {
        Self {
            m: Params::zeros_like(params),
            v: Params::zeros_like(params),
            step: 0,
            config,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Rescales `grads` in place so their global norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(F::from_f64_lossy(max_norm / norm));
    }
    norm
}

/// One AdamW update. Gradients are clipped (on a copy) before the moments
/// are updated. Returns the pre-clip gradient norm.
pub fn adamw_step<F: Real>(
    opt: &mut OptimizerState<F>,
    params: &mut Params<F>,
    grads: &Params<F>,
) -> Result<f64> {
    params.check_same_layout(grads)?;
    params.check_same_layout(&opt.m)?;
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NumericalFailure("gradient".into()));
    }
    let cfg = opt.config;
    let clip = match cfg.max_grad_norm {
        Some(max) if norm > max && norm > 0.0 => max / norm,
        _ => 1.0,
    };
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::from_f64_lossy(cfg.beta1), F::from_f64_lossy(cfg.beta2));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    let clip = F::from_f64_lossy(clip);
    let step_size = F::from_f64_lossy(cfg.lr / bc1);
    let inv_sqrt_bc2 = F::from_f64_lossy(1.0 / bc2.sqrt());
    let eps = F::from_f64_lossy(cfg.eps);
    let decay = F::from_f64_lossy(cfg.lr * cfg.weight_decay);

    let m_iter = opt.m.iter_mut();
    let v_iter = opt.v.iter_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.iter_mut().zip(grads.iter()).zip(m_iter).zip(v_iter) {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            let mi = b1 * m.data[i] + one_b1 * gi;
            let vi = b2 * v.data[i] + one_b2 * gi * gi;
            m.data[i] = mi;
            v.data[i] = vi;
            let mut x = p.data[i];
            if cfg.weight_decay != 0.0 {
                x -= decay * x;
            }
            x -= step_size * mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            p.data[i] = x;
        }
    }
    Ok(norm)
}
