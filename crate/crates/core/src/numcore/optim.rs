use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::{Error, Result};

/// AdamW hyperparameters. `Default` is the long-input fine-tuning table:
/// lr 1e-6, weight decay 1e-4, max grad norm 1.0, betas 0.9/0.98, eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            learning_rate: 1e-6,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) || !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(
                "epsilon, learning_rate and max_grad_norm must be positive".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamWState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// Global L2 norm over every gradient buffer, accumulated in f64 in
/// parameter order.
pub fn global_norm<T: Real>(params: &[Tensor<T>]) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = &p.grad {
            for &x in g {
                let x = x.f64();
                sq += x * x;
            }
        }
    }
    sq.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm<T: Real>(params: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if params.iter().all(|p| p.grad.is_none()) {
        return Err(Error::InvalidInput("clip_grad_norm without gradients".into()));
    }
    for p in params.iter() {
        if let Some(g) = &p.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("gradient passed to clip_grad_norm".into()));
            }
        }
    }
    let total = global_norm(params);
    if !total.is_finite() {
        return Err(Error::NonFinite("global gradient norm".into()));
    }
    if total > max_norm {
        let s = T::of(max_norm / total);
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for x in g.iter_mut() {
                    *x = *x * s;
                }
            }
        }
    }
    Ok(total)
}

/// One decoupled-weight-decay Adam update using each tensor's `grad`.
/// Tensors without a gradient are treated as having a zero gradient.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    state: &mut AdamWState<T>,
    hyper: &OptimHyper,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if state.m[i].len() != n || state.v[i].len() != n || p.grad.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Shape(format!("optimizer state for tensor {i} does not match its shape")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    let lr = T::of(hyper.learning_rate);
    let eps = T::of(hyper.epsilon);
    let decay = T::of(hyper.learning_rate * hyper.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let (data, grad) = p.data_and_grad_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (k, w) in data.iter_mut().enumerate() {
            let g = grad.map_or(T::zero(), |g| g[k]);
            m[k] = b1t * m[k] + one_b1 * g;
            v[k] = b2t * v[k] + one_b2 * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("parameter tensor {i} after AdamW step")));
        }
    }
    Ok(())
}
