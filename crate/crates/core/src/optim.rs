//! AdamW with decoupled weight decay.
//!
//! ```text
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! p ← p − lr·(m̂ / (√v̂ + ε)) − lr·wd·p      m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```
//!
//! Decay applies to projection weights only. Norm scales and shifts,
//! biases, the mask token and the positional table are never decayed.

use crate::error::{Error, Result};
use crate::vit::{param_layout, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 5e-4, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        OptimizerState { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One AdamW update in place.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(Error::ConfigMismatch("parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.eps);
    let decay = (lr as f64 * cfg.weight_decay as f64) as f32;

    let layout = param_layout(&params.config);
    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (i, (p, spec)) in params.tensors_mut().into_iter().zip(&layout).enumerate() {
        let g = &grads[i].data;
        let m = &mut ms[i].data;
        let v = &mut vs[i].data;
        let decays = spec.kind.decays() && decay != 0.0;
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            let update = (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            let w = p.data[j];
            p.data[j] = if decays { w - update - decay * w } else { w - update };
        }
    }
    Ok(())
}
