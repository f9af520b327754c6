//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    /// Zero moments congruent with `params` and the default hyperparameters.
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

/// `w ← w − lr·wd·w − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(dim_err!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() {
            return Err(dim_err!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                params.names()[i],
                params.tensors()[i].shape()
            ));
        }
        if !g.all_finite() {
            return Err(Error::Training(alloc::format!(
                "non-finite gradient for parameter {}",
                params.names()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    let (lr, b1, b2, eps, wd) = (
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    );
    for (i, w) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, wj) in w.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut x = *wj as f64;
            x -= lr * wd * x;
            x -= lr * (mj / bc1) / (libm::sqrt(vj / bc2) + eps);
            *wj = x as f32;
        }
    }
    Ok(())
}
