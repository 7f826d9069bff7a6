use serde::{Deserialize, Serialize};

use super::real::Real;
use super::SirenError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Decay applied directly to the weights (AdamW) rather than added to
    /// the gradient as an L2 term.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.012,
            decoupled_weight_decay: true,
        }
    }
}

/// First and second moment estimates, persisted across incremental updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<T: Real>(&mut self, config: &AdamConfig, params: &mut [T], grad: &[T]) -> Result<(), SirenError> {
        for got in [params.len(), grad.len()] {
            if got != self.m.len() {
                return Err(SirenError::ShapeMismatch { expected: self.m.len(), got });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let lr = config.learning_rate;
        let wd = config.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let mut theta = p.to_f64_lossy();
            let mut g = g.to_f64_lossy();
            if config.decoupled_weight_decay {
                theta *= 1.0 - lr * wd;
            } else {
                g += wd * theta;
            }
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            theta -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
            *p = T::from_f64_lossy(theta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let config = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut params = vec![0.5f64, -0.25, 1.0, 0.0];
        let grad = vec![3.0, -0.01, 1e3, 0.0];
        let mut state = AdamState::new(4);
        state.step(&config, &mut params, &grad).unwrap();
        let lr = config.learning_rate;
        assert!((params[0] - (0.5 - lr)).abs() < 1e-9);
        assert!((params[1] - (-0.25 + lr)).abs() < 1e-9);
        assert!((params[2] - (1.0 - lr)).abs() < 1e-9);
        assert_eq!(params[3], 0.0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let config = AdamConfig::default();
        let mut params = vec![2.0f64, -1.0];
        let mut state = AdamState::new(2);
        state.step(&config, &mut params, &[0.0, 0.0]).unwrap();
        let factor = 1.0 - 4e-4 * 0.012;
        assert!((params[0] - 2.0 * factor).abs() < 1e-15);
        assert!((params[1] + factor).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_enters_gradient() {
        let config = AdamConfig { decoupled_weight_decay: false, ..AdamConfig::default() };
        let mut params = vec![2.0f64];
        let mut state = AdamState::new(1);
        state.step(&config, &mut params, &[0.0]).unwrap();
        // g = wd·θ > 0, so the first step is −lr.
        assert!((params[0] - (2.0 - 4e-4)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let config = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut params = vec![0.7f64, -3.0];
        let mut state = AdamState::new(2);
        for _ in 0..5 {
            state.step(&config, &mut params, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(params, vec![0.7, -3.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut state = AdamState::new(3);
        let mut params = vec![0.0f64; 2];
        assert!(state.step(&AdamConfig::default(), &mut params, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn minimizes_quadratic() {
        let config = AdamConfig { learning_rate: 0.05, weight_decay: 0.0, ..AdamConfig::default() };
        let mut params = vec![3.0f32, -2.0];
        let mut state = AdamState::new(2);
        for _ in 0..2000 {
            let grad: Vec<f32> = params.iter().map(|p| 2.0 * (p - 1.0)).collect();
            state.step(&config, &mut params, &grad).unwrap();
        }
        assert!(params.iter().all(|p| (p - 1.0).abs() < 1e-2), "{params:?}");
    }
}
