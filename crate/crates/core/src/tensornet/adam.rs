use serde::{Deserialize, Serialize};

use crate::error::{dim_check, EmdError, Result};

/// Hyperparameters shared by every Adam instance in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Betas `(0.0, 0.99)` as used for distillation.
    pub fn distill(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        AdamState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Applies one update in place. A non-finite gradient rejects the whole
    /// update and leaves both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        dim_check("adam parameters", self.m.len(), params.len())?;
        dim_check("adam gradients", self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(EmdError::Numerical(format!(
                "non-finite gradient component {i} ({})",
                grads[i]
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(AdamConfig::distill(0.1), 3);
        let mut p = vec![1.0, 2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn single_step_matches_scalar_hand_computation() {
        // beta1 = 0, beta2 = 0.99: m = g, v = 0.01 g^2, v_hat = g^2,
        // so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig::distill(0.05);
        let mut st = AdamState::new(cfg, 2);
        let g = [0.3, -2.0];
        let mut p = vec![1.0, 1.0];
        st.step(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let want = 1.0 - 0.05 * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut st = AdamState::new(AdamConfig::distill(0.01), 1);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0]).unwrap();
        let first = p[0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!(first < 0.0 && p[0] < first);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut st = AdamState::new(AdamConfig::distill(0.01), 2);
        let mut p = vec![1.0, 1.0];
        let err = st.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        assert!(matches!(err, EmdError::Numerical(_)));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut st = AdamState::new(AdamConfig::distill(0.01), 2);
        assert!(st.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
