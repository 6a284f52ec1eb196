//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::neural::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(invalid("Adam decay rates must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "Adam state",
                expected: self.m.len(),
                found: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut Network, grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    state.update(net.params_mut(), grads, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        s.update(&mut p, &[0.0; 3], &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        s.update(&mut p, &[0.5, -20.0, 1e-3], &cfg).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-9);
        assert!((p[2] + 1e-3).abs() < 1e-7);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let target = [1.5, -0.7];
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..200 {
            let g = [2.0 * (p[0] - target[0]), 8.0 * (p[1] - target[1])];
            s.update(&mut p, &g, &cfg).unwrap();
        }
        let err = ((p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2)).sqrt();
        assert!(err < 1e-3, "error {err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::new(2);
        assert!(s.update(&mut [0.0; 3], &[0.0; 3], &AdamConfig::default()).is_err());
    }
}
