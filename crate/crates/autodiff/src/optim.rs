//! First-order optimizers over a [`ParamStore`].

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update from the accumulated gradients. Frozen parameters
    /// are left bit-identical. Nothing is modified if any gradient is
    /// non-finite.
    fn step(&mut self, params: &mut ParamStore) -> Result<()>;
}

fn check_finite(params: &ParamStore) -> Result<()> {
    match params.iter().find(|p| p.trainable() && !p.grad().is_finite()) {
        Some(p) => Err(AutodiffError::NonFiniteGradient(p.name().to_string())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_finite(params)?;
        for p in params.iter_mut().filter(|p| p.trainable()) {
            let (value, grad) = p.parts_mut();
            for (w, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_finite(params)?;
        if self.moments.len() != params.len() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value().shape()), Tensor::zeros(p.value().shape())))
                .collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            if !p.trainable() {
                continue;
            }
            let (value, grad) = p.parts_mut();
            let iter = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (mi, vi)) in iter {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
