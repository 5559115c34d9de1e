//! Bias-corrected Adam.

use crate::{ParamStore, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    /// Number of updates rejected because a gradient was not finite.
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            skipped: 0,
        }
    }
}

/// Apply one Adam update to `store` in place.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::Shape(format!(
            "adam: {} gradients / {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(store.tensors()).enumerate() {
        if g.shape() != p.shape() || state.m[i].len() != p.numel() {
            return Err(TensorError::Shape(format!(
                "adam: gradient {:?} vs parameter `{}` {:?}",
                g.shape(),
                store.names()[i],
                p.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    // step = lr * mhat / (sqrt(vhat) + eps) with mhat = m / c1, vhat = v / c2
    let lr_t = T::from_f64(cfg.lr / c1);
    let inv_sqrt_c2 = T::from_f64(1.0 / c2.sqrt());
    let eps = T::from_f64(cfg.eps);
    let frozen = cfg.lr == 0.0;
    for (i, p) in store.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            if !frozen {
                *w -= lr_t * m[j] / (v[j].sqrt() * inv_sqrt_c2 + eps);
            }
        }
    }
    Ok(StepOutcome::Applied)
}
