//! Adam optimizer with bias correction.

use super::layers::{EngineError, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over the given parameters. Gradients must be populated;
/// they are consumed (cleared) by the step.
pub fn adam_step<T: Scalar>(params: &mut [&mut Param<T>], cfg: &AdamConfig) -> Result<(), EngineError> {
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(EngineError::MissingGradient(p.name.clone()));
        }
    }
    let (b1, b2) = (T::real(cfg.beta1), T::real(cfg.beta2));
    let (lr, eps) = (T::real(cfg.lr), T::real(cfg.eps));
    let one = T::one();
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        let w = p.value.data_mut();
        for ((wi, (mi, vi)), &g) in w.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(grad.data()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi = *wi - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
