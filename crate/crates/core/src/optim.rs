//! First-order optimizers operating in place on parameter tensors.

use alloc::format;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

fn check_lengths<T: Scalar>(
    op: &'static str,
    params: &[Tensor<T>],
    grads: &[&[T]],
    state: &[Vec<T>],
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(TensorError::shape(
            op,
            format!(
                "{} parameters, {} gradients, {} state slots",
                params.len(),
                grads.len(),
                state.len()
            ),
        ));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(state).enumerate() {
        if p.numel() != g.len() || p.numel() != s.len() {
            return Err(TensorError::shape(
                op,
                format!(
                    "parameter {i} has {} elements, gradient {}, state {}",
                    p.numel(),
                    g.len(),
                    s.len()
                ),
            ));
        }
    }
    Ok(())
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[Tensor<T>], lr: T, momentum: T) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params
                .iter()
                .map(|p| alloc::vec![T::zero(); p.numel()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&[T]]) -> Result<(), TensorError> {
        check_lengths("sgd_step", params, grads, &self.velocity)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: T, beta1: T, beta2: T, eps: T) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            params
                .iter()
                .map(|p| alloc::vec![T::zero(); p.numel()])
                .collect()
        };
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&[T]]) -> Result<(), TensorError> {
        check_lengths("adam_step", params, grads, &self.first)?;
        self.steps += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.steps);
        let c2 = one - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
