//! Bias-corrected AdamW with decoupled weight decay, used for the 1-D /
//! embedding / output-head parameter group.

use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState<E: Element> {
    pub m: Vec<E>,
    pub v: Vec<E>,
    pub step_count: u64,
}

impl<E: Element> AdamWState<E> {
    pub fn new(numel: usize) -> Self {
        AdamWState { m: vec![E::zero(); numel], v: vec![E::zero(); numel], step_count: 0 }
    }
}

pub fn adamw_step<E: Element>(
    w: &Tensor<E>,
    grad: &[E],
    state: &mut AdamWState<E>,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteGradient);
    }
    state.step_count += 1;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let eps = E::from_f64(cfg.eps);
    let bias1 = E::one() - E::from_f64(cfg.beta1.powi(state.step_count as i32));
    let bias2 = E::one() - E::from_f64(cfg.beta2.powi(state.step_count as i32));
    let lr_e = E::from_f64(lr);
    let wd = E::from_f64(weight_decay);
    let mut data = w.data_mut();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (E::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (E::one() - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        data[i] = data[i] - lr_e * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_has_near_unit_normalized_magnitude() {
        // after bias correction m̂/√v̂ = g/|g| for any nonzero g
        let w = Tensor::from_vec(vec![3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let mut state = AdamWState::new(3);
        let lr = 0.1;
        adamw_step(&w, &[0.3, -4.0, 1e-3], &mut state, &AdamWConfig::default(), lr, 0.0)
            .unwrap();
        for (i, &v) in w.to_vec().iter().enumerate() {
            assert!(
                (v.abs() - lr).abs() < 1e-4,
                "coord {i}: |update| {} should be ~lr",
                v.abs()
            );
        }
        assert_eq!(w.to_vec()[1].signum(), 1.0, "moves against the gradient");
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let w = Tensor::from_vec(vec![2], vec![1.5f64, -2.5]).unwrap();
        let before = w.to_vec();
        let mut state = AdamWState::new(2);
        adamw_step(&w, &[0.0, 0.0], &mut state, &AdamWConfig::default(), 0.01, 0.0).unwrap();
        assert_eq!(w.to_vec(), before);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // f(w) = (w - 3)²/2, grad = w - 3; 500 steps at lr 0.01
        let w = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
        let mut state = AdamWState::new(1);
        for _ in 0..500 {
            let grad = [w.item() - 3.0];
            adamw_step(&w, &grad, &mut state, &AdamWConfig::default(), 0.01, 0.0).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 1e-3, "ended at {}", w.item());
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let w = Tensor::from_vec(vec![1], vec![1.0f64]).unwrap();
        let mut state = AdamWState::new(1);
        adamw_step(&w, &[0.0], &mut state, &AdamWConfig::default(), 0.1, 0.5).unwrap();
        assert!((w.item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let w = Tensor::from_vec(vec![1], vec![1.0f64]).unwrap();
        let mut state = AdamWState::new(1);
        assert!(matches!(
            adamw_step(&w, &[f64::INFINITY], &mut state, &AdamWConfig::default(), 0.1, 0.0),
            Err(OptimError::NonFiniteGradient)
        ));
    }
}
