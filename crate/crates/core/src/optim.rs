//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one tensor.
#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam update of `param` in place. `step` is the 1-based update count.
pub fn adam_step<T: Real>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Dim(format!(
            "adam state for {name}: param {}, grad {}, moments {}/{}",
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in parameter {name} at index {i}: {}",
            grad[i]
        )));
    }
    let step = step.max(1) as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::c(1.0 - cfg.beta1.powi(step));
    let c2 = T::c(1.0 - cfg.beta2.powi(step));
    let (lr, eps) = (T::c(lr), T::c(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every parameter of a [`ParamStore`].
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            state: params.params().iter().map(|p| Moments::zeros(p.tensor.numel())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently stored on the
    /// parameters. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        for (p, st) in params.params().iter().zip(self.state.iter_mut()) {
            let grad = p.tensor.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let mut data = p.tensor.data_mut();
            adam_step(&p.name, &mut data, g, st, self.step, lr, &self.cfg)?;
        }
        Ok(())
    }
}
