use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step. `step` counts from 1.
pub fn adam_update(
    weights: &mut Tensor,
    grads: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    weights.same_shape(grads)?;
    weights.same_shape(m)?;
    weights.same_shape(v)?;
    if step == 0 {
        return Err(Error::InvalidModel("adam step counts from 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for (((w, &g), mi), vi) in weights
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}
