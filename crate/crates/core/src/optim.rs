//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update of every parameter. `grads[i]` pairs with parameter `i`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<&Tensor<T>>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let g = g.ok_or_else(|| Error::MissingGrad(params.names()[i].clone()))?;
            if g.shape() != params.values()[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{}` has shape {:?}",
                    params.names()[i],
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let correction1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let correction2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(cfg.eps);

        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
