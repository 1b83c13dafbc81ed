//! AdamW, global-norm clipping and parameter EMA over lists of tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the count of applied and skipped steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Applied updates; drives bias correction.
    pub t: u64,
    pub skipped: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
            skipped: 0,
        }
    }
}

fn check_shapes(what: &'static str, a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("{what}: {} tensors vs {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::dim(what, x.shape(), y.shape()));
        }
    }
    Ok(())
}

/// L2 norm of all gradients taken together.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be > 0, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// Returns `false`, touching nothing but the skip counter, when any gradient
/// is non-finite.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamW) -> Result<bool> {
    check_shapes("adamw grads", params, grads)?;
    check_shapes("adamw moments", params, &state.m)?;
    check_shapes("adamw moments", params, &state.v)?;
    if !grads.iter().all(Tensor::is_finite) {
        state.skipped += 1;
        return Ok(false);
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            *pi -= hp.lr * (step + hp.weight_decay * *pi);
        }
    }
    Ok(true)
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    check_shapes("ema", ema, params)?;
    for (e, p) in ema.iter_mut().zip(params) {
        for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
            *ei = decay * *ei + (1.0 - decay) * pi;
        }
    }
    Ok(())
}
