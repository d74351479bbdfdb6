//! Adam optimizer.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter first/second moment state plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Conventional defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) around
    /// the given constant learning rate.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        AdamState {
            first: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            second: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over every parameter in the store,
/// consuming (and then zeroing) the accumulated gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters but store has {}",
            state.first.len(),
            store.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (idx, id) in store.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
        let param = store.get_mut(id);
        if state.first[idx].shape() != param.value.shape() {
            return Err(Error::Contract(format!(
                "parameter {:?} changed shape between optimizer steps",
                param.name
            )));
        }
        let m = state.first[idx].data_mut();
        let v = state.second[idx].data_mut();
        let g = param.grad.data();
        let w = param.value.data_mut();
        for i in 0..w.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        param.grad.fill(0.0);
    }
    Ok(())
}
