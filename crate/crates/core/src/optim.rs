//! AdamW with a polynomial learning-rate schedule.
//!
//! Weight decay is decoupled: it is applied directly to the parameters,
//! scaled by the current learning rate, and never enters the moment
//! estimates.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Exponent of the polynomial decay schedule.
    pub lr_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Contract("base_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Contract("weight_decay must be nonnegative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Contract(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Contract("epsilon must be positive".into()));
        }
        if !(self.lr_power >= 0.0 && self.lr_power.is_finite()) {
            return Err(Error::Contract("lr_power must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(n_params: usize) -> Self {
        OptimState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Polynomial decay from `base_lr` to zero over `max_iters`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iters: u64, power: f64) -> f64 {
    if max_iters == 0 || iter >= max_iters {
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iters as f64).powf(power)
}

/// One AdamW update in place. `lr` is the already-scheduled rate.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "parameter/gradient/state lengths disagree: {} vs {} vs {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradients passed to the optimizer".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * params[i]);
    }
    if !params.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(())
}
