//! Rectified-flow interpolation, timestep sampling and training losses.
//!
//! Convention: `t = 0` is data and `t = 1` is noise, so
//! `x_t = (1 − t)·x0 + t·ε` and the target velocity is `ε − x0`.

mod encoder;

pub use encoder::{AlignmentEncoder, ToyAlignmentEncoder};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PixelDit;
use crate::nn::Bound;
use crate::tensor::{Tape, Tensor, Var};

/// Samples stay this far inside (0, 1).
pub const T_MARGIN: f64 = 1e-9;

/// Distribution of training timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestepSampler {
    /// `t = σ(z)`, `z ~ N(mean, std)`.
    LogitNormal { mean: f64, std: f64 },
    Uniform,
    /// Every sample uses the same `t` (tests and diagnostics; endpoints allowed).
    Fixed { t: f64 },
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl TimestepSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimestepSampler::LogitNormal { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                sigmoid(mean + std * z).clamp(T_MARGIN, 1.0 - T_MARGIN)
            }
            TimestepSampler::Uniform => rng.gen_range(T_MARGIN..1.0 - T_MARGIN),
            TimestepSampler::Fixed { t } => t,
        }
    }
}

/// One rectified-flow training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub eps: Tensor,
    /// One time per sample.
    pub t: Vec<f64>,
    pub x_t: Tensor,
    pub v_t: Tensor,
}

/// `(1 − t)·x0 + t·ε` with `t` broadcast over each sample.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::dim("interpolate", x0.shape(), eps.shape()));
    }
    let b = x0.shape()[0];
    if t.len() != b {
        return Err(Error::Input(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let per = x0.numel() / b;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let ti = t[i / per];
            (1.0 - ti) * x + ti * e
        })
        .collect();
    Tensor::new(x0.shape(), data)
}

/// Draw ε and t, then form the interpolant and its velocity target.
pub fn make_flow_batch<R: Rng + ?Sized>(x0: &Tensor, rng: &mut R, sampler: &TimestepSampler) -> Result<FlowBatch> {
    let b = *x0
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("flow batch needs a batch axis".into()))?;
    let t: Vec<f64> = (0..b).map(|_| sampler.sample(rng)).collect();
    let eps = Tensor::from_fn(x0.shape(), |_| rng.sample(StandardNormal));
    flow_batch_from(x0, eps, t)
}

/// Assemble a batch from explicit noise and times.
pub fn flow_batch_from(x0: &Tensor, eps: Tensor, t: Vec<f64>) -> Result<FlowBatch> {
    let x_t = interpolate(x0, &eps, &t)?;
    let v_data = eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect();
    let v_t = Tensor::new(x0.shape(), v_data)?;
    Ok(FlowBatch {
        x0: x0.clone(),
        eps,
        t,
        x_t,
        v_t,
    })
}

/// Replace each label by `null` with probability `prob`.
pub fn drop_labels<R: Rng + ?Sized>(y: &[usize], prob: f64, null: usize, rng: &mut R) -> Vec<usize> {
    y.iter()
        .map(|&c| if rng.gen::<f64>() < prob { null } else { c })
        .collect()
}

/// Mean squared error between a predicted velocity and the target.
pub fn loss_diffusion<'t>(velocity: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let tape = velocity.tape();
    let loss = velocity.sub(tape.constant(target.clone()))?.square().mean_all();
    let v = loss.value().item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("diffusion loss is {v}")));
    }
    Ok(loss)
}

/// Mean over tokens of `1 − cos(projected, features)`.
///
/// Rows where either side has zero norm count as similarity 0; their number
/// is returned alongside the loss.
pub fn loss_repa<'t>(projected: Var<'t>, features: &Tensor) -> Result<(Var<'t>, usize)> {
    let tape = projected.tape();
    let (cos, degenerate) = projected.cosine_lastdim(tape.constant(features.clone()))?;
    let n = cos.value().numel() as f64;
    let one_minus = cos.scale(-1.0).sum_all().scale(1.0 / n);
    let loss = one_minus.add(tape.constant(Tensor::scalar(1.0)))?;
    Ok((loss, degenerate))
}

/// Pieces of the training objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct TrainingLoss<'t> {
    pub total: Var<'t>,
    pub diffusion: f64,
    pub repa: f64,
    pub degenerate: usize,
}

/// `L_diff + λ·L_repa` on one batch. The alignment term is skipped when the
/// model has no projector, no encoder is given or `lambda_repa` is 0.
pub fn training_loss<'t>(
    model: &PixelDit,
    tape: &'t Tape,
    p: &Bound<'t>,
    batch: &FlowBatch,
    y: &[usize],
    encoder: Option<&dyn AlignmentEncoder>,
    lambda_repa: f64,
) -> Result<TrainingLoss<'t>> {
    let out = model.forward(tape, p, tape.constant(batch.x_t.clone()), &batch.t, y)?;
    let diff = loss_diffusion(out.velocity, &batch.v_t)?;
    let diffusion = diff.value().item();
    match (out.repa, encoder) {
        (Some(proj), Some(enc)) if lambda_repa != 0.0 => {
            let features = enc.encode(&batch.x0)?;
            let (repa, degenerate) = loss_repa(proj, &features)?;
            let repa_value = repa.value().item();
            Ok(TrainingLoss {
                total: diff.add(repa.scale(lambda_repa))?,
                diffusion,
                repa: repa_value,
                degenerate,
            })
        }
        _ => Ok(TrainingLoss {
            total: diff,
            diffusion,
            repa: 0.0,
            degenerate: 0,
        }),
    }
}
