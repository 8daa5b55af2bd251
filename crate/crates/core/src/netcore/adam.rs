use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta_m: f64,
    pub beta_v: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        OptimizerState {
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            learning_rate,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update to `params`. A non-finite gradient leaves both the
    /// parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::DimMismatch {
                expected: params.len(),
                got: grad.len(),
                context: "optimizer gradient",
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step_count += 1;
        let k = self.step_count as i32;
        let m_corr = 1.0 - self.beta_m.powi(k);
        let v_corr = 1.0 - self.beta_v.powi(k);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta_m * *m + (1.0 - self.beta_m) * g;
            *v = self.beta_v * *v + (1.0 - self.beta_v) * g * g;
            let m_hat = *m / m_corr;
            let v_hat = *v / v_corr;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn adam_step(&mut self, net: &mut Network, grad: &[f64]) -> Result<()> {
        self.step(net.params_mut(), grad)
    }
}

/// `target <- (1 - tau) target + tau online`, elementwise.
pub fn polyak_update(target: &mut Network, online: &Network, tau: f64) -> Result<()> {
    if target.spec() != online.spec() {
        return Err(Error::invalid("polyak update between networks of different specs"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau {tau} outside [0, 1]")));
    }
    for (t, o) in target.params_mut().iter_mut().zip(online.params()) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}
