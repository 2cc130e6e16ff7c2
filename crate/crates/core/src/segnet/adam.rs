use alloc::vec;
use alloc::vec::Vec;

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected first/second moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NetError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NetError::LengthMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient { index });
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = [1.0, -2.0];
        adam.step(&mut p, &[0.3, -5.0], 0.01).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| at t = 1
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = [0.5, 1.5, -3.0];
        for _ in 0..100 {
            adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(p, [0.5, 1.5, -3.0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = [0.0, 0.0];
        assert_eq!(
            adam.step(&mut p, &[0.0, f64::NAN], 0.1),
            Err(NetError::NonFiniteGradient { index: 1 })
        );
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn matches_hand_computed_two_steps() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(1, cfg);
        let mut p = [0.0];
        adam.step(&mut p, &[1.0], 0.1).unwrap();
        adam.step(&mut p, &[0.5], 0.1).unwrap();
        let m = 0.9 * 0.1 + 0.1 * 0.5;
        let v = 0.999 * 0.001 + 0.001 * 0.25;
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        let step1 = 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] + step1 + step2).abs() < 1e-12);
    }
}
