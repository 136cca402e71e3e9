//! Adam optimizer with bias correction, usable for ascent or descent.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// true flips the update sign so the objective is maximized.
    pub maximize: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            maximize: false,
        }
    }
}

impl AdamConfig {
    pub fn ascent(lr: f64) -> Self {
        Self {
            lr,
            maximize: true,
            ..Self::default()
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update for a single flat parameter tensor. `t` is the 1-based
/// global step count used for bias correction.
pub fn adam_step(
    cfg: &AdamConfig,
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let sign = if cfg.maximize { 1.0 } else { -1.0 };
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] += sign * cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer over a fixed list of parameter tensors.
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update across all registered tensors. `params` and `grads`
    /// must match the sizes given at construction, in the same order.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::DimensionMismatch {
                what: "adam slots",
                expected: self.states.len(),
                actual: params.len().max(grads.len()),
            });
        }
        self.t += 1;
        for ((param, grad), state) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(&self.cfg, param, grad, state, self.t)?;
        }
        Ok(())
    }
}
