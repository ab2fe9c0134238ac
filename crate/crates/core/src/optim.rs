//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: T,
    pub weight_decay: T,
    /// First moment, one tensor per parameter.
    pub m: ParamSet<T>,
    /// Second moment.
    pub v: ParamSet<T>,
    /// Number of steps taken so far.
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, lr: T, weight_decay: T) -> Self {
        Self {
            lr,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        params.check_mirrors(&self.m)?;
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if let Some((i, g)) = grads
            .iter()
            .enumerate()
            .find(|(i, g)| g.shape() != params.tensors()[*i].shape())
        {
            return Err(Error::Shape(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                params.tensors()[i].shape()
            )));
        }
        self.step += 1;
        let b1 = T::lit(BETA1);
        let b2 = T::lit(BETA2);
        let eps = T::lit(ADAM_EPS);
        let one = T::one();
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let (lr, wd) = (self.lr, self.weight_decay);
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut());
        for ((theta, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(moments) {
            let it = theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((th, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *th = *th - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
            }
        }
        Ok(())
    }
}
