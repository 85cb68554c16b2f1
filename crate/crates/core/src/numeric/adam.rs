//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named parameter tensor paired with its gradient buffer.
pub struct ParamTensor<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over every tensor, then zeroes the gradients.
    ///
    /// All gradients are checked before anything is written, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, tensors: &mut [ParamTensor<'_>]) -> Result<()> {
        let step = self.t + 1;
        for t in tensors.iter() {
            if t.value.len() != t.grad.len() {
                return Err(Error::shape("AdamState::step", t.value.len(), t.grad.len()));
            }
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: t.name.clone(),
                    step,
                });
            }
        }
        if self.m.is_empty() {
            self.m = tensors.iter().map(|t| vec![0.0; t.value.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != tensors.len()
            || self.m.iter().zip(tensors.iter()).any(|(m, t)| m.len() != t.value.len())
        {
            return Err(Error::InvalidArgument(
                "parameter layout changed between optimizer steps".into(),
            ));
        }

        self.t = step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);

        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.value.len() {
                let g = t.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                t.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: &mut [f64], grad: &mut [f64]) -> AdamState {
        let mut state = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        state
            .step(&mut [ParamTensor {
                name: "w".into(),
                value,
                grad,
            }])
            .unwrap();
        state
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = [1.0, -2.0];
        let mut g = [0.0, 0.0];
        let state = one(&mut w, &mut g);
        assert_eq!(w, [1.0, -2.0]);
        assert_eq!(state.m[0], vec![0.0, 0.0]);
        assert_eq!(state.v[0], vec![0.0, 0.0]);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut w = [0.0, 0.0, 0.0];
        let mut g = [3.0, -0.5, 1e-3];
        one(&mut w, &mut g);
        let expected = |gi: f64| -0.1 * gi / (gi.abs() + 1e-8);
        for (wi, gi) in w.iter().zip([3.0, -0.5, 1e-3]) {
            assert!((wi - expected(gi)).abs() < 1e-12);
        }
        assert_eq!(g, [0.0, 0.0, 0.0], "grads zeroed after step");
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_step() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut w = [0.0];
        let mut g = [f64::NAN];
        let err = state
            .step(&mut [ParamTensor {
                name: "decoder.1.weight".into(),
                value: &mut w,
                grad: &mut g,
            }])
            .unwrap_err();
        match err {
            Error::NonFiniteGradient { tensor, step } => {
                assert_eq!(tensor, "decoder.1.weight");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(w, [0.0]);
        assert_eq!(state.steps(), 0);
    }

    /// Scalar recurrence written out independently of `AdamState`.
    fn reference_quadratic(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_converges_and_matches_reference_recurrence() {
        let mut state = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut w = [0.0];
        for _ in 0..100 {
            let mut g = [2.0 * (w[0] - 3.0)];
            state
                .step(&mut [ParamTensor {
                    name: "w".into(),
                    value: &mut w,
                    grad: &mut g,
                }])
                .unwrap();
        }
        let reference = reference_quadratic(100, 0.1);
        assert!((w[0] - 3.0).abs() < 0.1, "w = {}", w[0]);
        assert!((w[0] - reference).abs() < 1e-12);
    }
}
