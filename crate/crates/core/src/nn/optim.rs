use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{ParamStore, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Every parameter needs a gradient.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid("optimizer state does not match parameter store"));
    }
    if let Some(i) = params.tensors.iter().position(|t| t.grad.is_none()) {
        return Err(Error::MissingGrad(params.names[i].clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    let one = T::one();
    for ((p, m), v) in params.tensors.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.as_ref().expect("checked above");
        for i in 0..p.data.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step decay: `base_lr / decay_factor^floor(epoch / decay_every_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            decay_factor: 10.0,
            decay_every_epochs: 10,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(Error::invalid("decay_factor must exceed 1"));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::invalid("decay_every_epochs must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr / self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }
}
