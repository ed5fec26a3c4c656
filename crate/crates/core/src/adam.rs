//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One update of every tensor in `params` from the matching entry in `grads`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros_like(p)).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::State("optimizer state does not match the parameters".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((x, &gi), (mi, vi)) in iter {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(x: &mut Tensor, g: &Tensor, state: &mut AdamState) {
        adam_step(&mut [x], &[g], &AdamConfig::default(), state).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = x.clone();
        let mut state = AdamState::default();
        step(&mut x, &Tensor::zeros(&[3]), &mut state);
        assert_eq!(x, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut x = Tensor::zeros(&[3]);
        let g = Tensor::new(&[3], vec![0.3, -7.0, 1e-2]).unwrap();
        step(&mut x, &g, &mut AdamState::default());
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (xi, gi) in x.data().iter().zip(g.data()) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((xi - expect).abs() < 1e-18, "{xi} vs {expect}");
            assert!((xi + 1e-3 * gi.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_trace_two_steps() {
        let (b1, b2, lr, eps): (f64, f64, f64, f64) = (0.9, 0.999, 1e-3, 1e-8);
        let (g1, g2) = (0.5, -0.25);
        let mut x_ref = 2.0;
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        x_ref -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        x_ref -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut x = Tensor::scalar(2.0);
        let mut state = AdamState::default();
        step(&mut x, &Tensor::scalar(g1), &mut state);
        step(&mut x, &Tensor::scalar(g2), &mut state);
        assert!((x.data()[0] - x_ref).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }
}
