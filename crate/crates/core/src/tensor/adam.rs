use super::Tensor;
use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState { step: 0, m: vec![0.0; len], v: vec![0.0; len], config }
    }
}

/// Applies one bias-corrected Adam update in place and clears the gradient.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return contract_err(format!(
            "optimizer state of length {} does not match parameter of shape {:?}",
            state.m.len(),
            param.shape()
        ));
    }
    let Some(grad) = param.take_grad() else {
        return contract_err(format!("parameter of shape {:?} has no gradient", param.shape()));
    };
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m as f64 / bc1;
        let v_hat = *v as f64 / bc2;
        *p -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
    }
    Ok(())
}
