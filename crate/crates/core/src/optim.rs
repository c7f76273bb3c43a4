//! Adam with decoupled weight decay.

use crate::diff::Mat;
use crate::error::{CgrlError, Result};
use crate::scalar::Scalar;

/// Optimizer state plus the training hyperparameters it travels with.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    /// Carried here alongside the other training hyperparameters; consumed
    /// by the forward pass, not by the update itself.
    pub dropout_rate: T,
    pub t: u64,
    first_moment: Vec<Mat<T>>,
    second_moment: Vec<Mat<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: T, weight_decay: T, dropout_rate: T) -> Self {
        AdamState {
            lr,
            beta1: T::cast(0.9),
            beta2: T::cast(0.999),
            eps: T::cast(1e-8),
            weight_decay,
            dropout_rate,
            t: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update over a fixed-order parameter list. Decay is decoupled:
    /// applied to the parameter before the adaptive step.
    pub fn step(&mut self, params: &mut [&mut Mat<T>], grads: &[Mat<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CgrlError::invalid("adam_step", "param/grad arity mismatch"));
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| Mat::zeros(g.raw_dim())).collect();
            self.second_moment = grads.iter().map(|g| Mat::zeros(g.raw_dim())).collect();
        }
        for (p, g) in params.iter().zip(grads) {
            if p.raw_dim() != g.raw_dim() {
                return Err(CgrlError::invalid("adam_step", "param/grad shape mismatch"));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CgrlError::NonFinite("adam_step gradient"));
            }
        }
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let p = &mut *params[i];
            let g = &grads[i];
            if self.weight_decay > T::zero() {
                let shrink = one - self.lr * self.weight_decay;
                p.mapv_inplace(|x| x * shrink);
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (one - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| {
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi
            });
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi = *pi - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}
