//! AdamW with decoupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Multiplies the base rate by `factor` at each listed fraction of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepSchedule {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            milestones: vec![0.9, 0.95],
            factor: 0.1,
        }
    }
}

impl StepSchedule {
    /// Learning rate at zero-based `iteration` out of `total`.
    pub fn lr(&self, base: f64, iteration: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| iteration >= (f * total as f64).round() as usize)
            .count();
        base * self.factor.powi(passed as i32)
    }
}

/// One AdamW update in place.
pub fn adamw_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: if grad.len() != params.len() { grad.len() } else { state.m.len() },
        });
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let decayed = params[i] * weight_decay;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS)) + lr * decayed;
    }
    Ok(())
}
