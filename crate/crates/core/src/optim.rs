//! Optimizers: SGD with momentum and Adam, with per-tensor moment buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer family and hyperparameters, shared by every tensor of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimSpec {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimSpec {
    pub fn adam(lr: f64) -> Self {
        OptimSpec::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimSpec::Sgd { lr, momentum }
    }
}

/// Moment buffers for one parameter tensor. Buffers always match the shape of
/// the tensor they belong to; `t` counts Adam steps for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub enum Moments {
    Sgd { velocity: Tensor },
    Adam { m: Tensor, v: Tensor, t: u64 },
}

impl Moments {
    pub fn fresh(spec: &OptimSpec, shape: &[usize]) -> Result<Self> {
        Ok(match spec {
            OptimSpec::Sgd { .. } => Moments::Sgd {
                velocity: Tensor::zeros(shape)?,
            },
            OptimSpec::Adam { .. } => Moments::Adam {
                m: Tensor::zeros(shape)?,
                v: Tensor::zeros(shape)?,
                t: 0,
            },
        })
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Moments::Sgd { velocity } => velocity.shape(),
            Moments::Adam { m, .. } => m.shape(),
        }
    }
}

/// Advance one parameter tensor by its gradient, updating the moments.
pub fn optimizer_step(
    spec: &OptimSpec,
    param: &mut Tensor,
    moments: &mut Moments,
    grad: &Tensor,
) -> Result<()> {
    if grad.shape() != param.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if moments.shape() != param.shape() {
        return Err(Error::ShapeMismatch(format!(
            "moment shape {:?} does not match parameter shape {:?}",
            moments.shape(),
            param.shape()
        )));
    }
    match (spec, moments) {
        (OptimSpec::Sgd { lr, momentum }, Moments::Sgd { velocity }) => {
            for k in 0..param.len() {
                let v = momentum * velocity.data()[k] + grad.data()[k];
                velocity.data_mut()[k] = v;
                param.data_mut()[k] -= lr * v;
            }
        }
        (
            OptimSpec::Adam { lr, beta1, beta2, eps },
            Moments::Adam { m, v, t },
        ) => {
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            for k in 0..param.len() {
                let g = grad.data()[k];
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * g;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * g * g;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                param.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        _ => {
            return Err(Error::ShapeMismatch(
                "moment buffers do not match the optimizer kind".into(),
            ))
        }
    }
    Ok(())
}
