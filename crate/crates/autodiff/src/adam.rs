//! Adam with bias correction.

use crate::array::Array;
use crate::error::{AdError, AdResult};
use crate::params::ParamSet;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Optimizer state: step count and first/second moment estimates, one pair
/// per parameter in [`ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must align with `params` by position and
    /// shape; a non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array]) -> AdResult<()> {
        if grads.len() != params.len() {
            return Err(AdError::Invalid(format!("adam: {} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AdError::Shape { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            if !g.all_finite() {
                return Err(AdError::NonFiniteGradient { name: name.to_string() });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| Array::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(AdError::Invalid("adam: parameter set changed between steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.arrays_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(value)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.005);
        for _ in 0..3 {
            adam.step(&mut p, &[Array::vector(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let mut p = single(vec![0.0, 0.0, 0.0]);
        let mut adam = Adam::new(0.005);
        let g = vec![3.0, -0.25, 1e-3];
        adam.step(&mut p, &[Array::vector(g.clone())]).unwrap();
        for (w, gi) in p.get("w").unwrap().data().iter().zip(&g) {
            let expected = -0.005 * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert!(w.abs() <= 0.005);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = single(vec![0.3, 0.7]);
        let mut adam = Adam::new(0.0);
        adam.step(&mut p, &[Array::vector(vec![5.0, -1.0])]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3, 0.7]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(vec![0.0]);
        let err = Adam::new(0.1).step(&mut p, &[Array::vector(vec![f64::NAN])]).unwrap_err();
        assert_eq!(err, AdError::NonFiniteGradient { name: "w".into() });
        assert_eq!(p.get("w").unwrap().data(), &[0.0]);
    }
}
