use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default))]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::network()
    }
}

impl AdamConfig {
    /// Defaults for network training.
    pub const fn network() -> Self {
        Self { step_size: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// Defaults for trajectory optimization.
    pub const fn trajectory() -> Self {
        Self { step_size: 1e-2, ..Self::network() }
    }

    pub fn with_step_size(self, step_size: f64) -> Self {
        Self { step_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(config_err!("adam step size must be positive, got {}", self.step_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err!("adam epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, first: vec![0.0; len], second: vec![0.0; len], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One descent step: `params -= step · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.update(params, grad, 1.0)
    }

    /// One ascent step on an objective whose gradient is `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.update(params, grad, -1.0)
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], sign: f64) -> Result<()> {
        if params.len() != self.first.len() || grad.len() != self.first.len() {
            return Err(shape_err!(
                "adam state has {} slots but got {} params and {} gradients",
                self.first.len(),
                params.len(),
                grad.len()
            ));
        }
        let AdamConfig { step_size, beta1, beta2, epsilon } = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for i in 0..params.len() {
            let g = sign * grad[i];
            self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
            self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= step_size * m_hat / (math::sqrt(v_hat) + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(params: &[f64], grad: &[f64], state: &AdamState) -> Result<(Vec<f64>, AdamState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.step(&mut p, grad)?;
    Ok((p, s))
}
