//! ODE samplers integrating a velocity field from noise (t = 1) to data (t = 0).

mod analytic;

pub use analytic::GaussianFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PixelDit;
use crate::tensor::Tensor;

/// Clamp applied to t before taking `λ = log((1 − t)/t)`.
pub const LAMBDA_T_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
    #[default]
    FlowDpm,
}

impl Solver {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            "flow_dpm" | "flow-dpm" => Ok(Solver::FlowDpm),
            _ => Err(Error::Config(format!("unknown solver {s:?}; expected euler, heun or flow_dpm"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::FlowDpm => "flow_dpm",
        }
    }
}

/// Integration and guidance settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Closed interval `[t_lo, t_hi]` where guidance is active.
    pub cfg_interval: [f64; 2],
    pub shift_alpha: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::FlowDpm,
            steps: 100,
            cfg_scale: 3.25,
            cfg_interval: [0.1, 1.0],
            shift_alpha: 3.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.cfg_interval;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("cfg_interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        if !(self.shift_alpha >= 1.0 && self.shift_alpha.is_finite()) {
            return Err(Error::Config(format!("shift_alpha must be >= 1, got {}", self.shift_alpha)));
        }
        Ok(())
    }
}

/// `t_i = α·u_i / (1 + (α − 1)·u_i)` on `u_i = 1 − i/steps`; strictly
/// decreasing from exactly 1 to exactly 0.
pub fn make_schedule(steps: usize, shift_alpha: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(shift_alpha >= 1.0 && shift_alpha.is_finite()) {
        return Err(Error::Config(format!("shift_alpha must be >= 1, got {shift_alpha}")));
    }
    let n = steps as f64;
    Ok((0..=steps)
        .map(|i| {
            if i == 0 {
                1.0
            } else if i == steps {
                0.0
            } else {
                let u = 1.0 - i as f64 / n;
                shift_alpha * u / (1.0 + (shift_alpha - 1.0) * u)
            }
        })
        .collect())
}

/// True when guidance applies at time `t` (closed interval).
pub fn guidance_active(scale: f64, t: f64, interval: [f64; 2]) -> bool {
    scale != 1.0 && interval[0] <= t && t <= interval[1]
}

/// `v_u + scale·(v_c − v_u)` inside the interval, `v_c` elsewhere.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, scale: f64, t: f64, interval: [f64; 2]) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::dim("guided_velocity", v_cond.shape(), v_uncond.shape()));
    }
    if !guidance_active(scale, t, interval) {
        return Ok(v_cond.clone());
    }
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    Tensor::new(v_cond.shape(), data)
}

fn axpy(x: &Tensor, a: f64, v: &Tensor) -> Tensor {
    let data = x.data().iter().zip(v.data()).map(|(xi, vi)| xi + a * vi).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// `x + (t_next − t)·v`.
pub fn euler_step(x: &Tensor, t: f64, t_next: f64, v: &Tensor) -> Tensor {
    axpy(x, t_next - t, v)
}

/// Explicit trapezoid: Euler predictor, then the mean of both endpoint slopes.
pub fn heun_step(
    x: &Tensor,
    t: f64,
    t_next: f64,
    v: &Tensor,
    velocity: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    let pred = euler_step(x, t, t_next, v);
    let v_next = velocity(&pred, t_next)?;
    let data = x
        .data()
        .iter()
        .zip(v.data().iter().zip(v_next.data()))
        .map(|(xi, (a, b))| xi + (t_next - t) * 0.5 * (a + b))
        .collect();
    Tensor::new(x.shape(), data)
}

/// `λ = log((1 − t)/t)` with t clamped to `[1e-4, 1 − 1e-4]`.
pub fn lambda(t: f64) -> f64 {
    let t = t.clamp(LAMBDA_T_MIN, 1.0 - LAMBDA_T_MIN);
    ((1.0 - t) / t).ln()
}

/// Previous data prediction kept by the multistep solver.
#[derive(Clone, Debug, Default)]
pub struct DpmHistory {
    prev: Option<(f64, Tensor)>,
}

impl DpmHistory {
    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }
}

/// Multistep second-order DPM-Solver++ in data-prediction form.
///
/// The velocity is converted to `x̂₀ = x − t·v`; with `α = 1 − t`, `σ = t` the
/// first-order update is `x' = (σ'/σ)·x + (α' − α·σ'/σ)·x̂₀`, to which the
/// multistep correction `−½·α'·(e^{−h} − 1)·(x̂₀ − x̂₀_prev)/r` is added when a
/// previous prediction exists. The step into `t = 0` is first order, which
/// returns `x̂₀` itself.
pub fn flow_dpm_step(history: &mut DpmHistory, x: &Tensor, t: f64, t_next: f64, v: &Tensor) -> Tensor {
    let m0 = axpy(x, -t, v);
    let lam = lambda(t);
    let (alpha_n, sigma_n) = (1.0 - t_next, t_next);
    let ratio = sigma_n / t;
    let base = alpha_n - (1.0 - t) * ratio;
    let mut out: Vec<f64> = x
        .data()
        .iter()
        .zip(m0.data())
        .map(|(xi, m)| ratio * xi + base * m)
        .collect();
    if let (Some((lam_prev, m1)), true) = (&history.prev, t_next > 0.0) {
        let h = lambda(t_next) - lam;
        let r = (lam - lam_prev) / h;
        let coef = -0.5 * alpha_n * ((-h).exp() - 1.0) / r;
        for ((o, a), b) in out.iter_mut().zip(m0.data()).zip(m1.data()) {
            *o += coef * (a - b);
        }
    }
    history.prev = Some((lam, m0));
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Something that predicts velocities, with and without its condition.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, conditional: bool) -> Result<Tensor>;
}

/// The trained model with fixed labels; the unconditional branch uses the
/// null class.
pub struct ModelField<'a> {
    pub model: &'a PixelDit,
    pub labels: Vec<usize>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64, conditional: bool) -> Result<Tensor> {
        let b = x.shape()[0];
        let y = if conditional {
            self.labels.clone()
        } else {
            vec![self.model.config.null_class(); b]
        };
        self.model.velocity(x, &vec![t; b], &y)
    }
}

/// Guided velocity at `t`; the unconditional branch is only evaluated when
/// guidance is active.
pub fn field_velocity(field: &dyn VelocityField, cfg: &SamplerConfig, x: &Tensor, t: f64) -> Result<Tensor> {
    let vc = field.velocity(x, t, true)?;
    if !guidance_active(cfg.cfg_scale, t, cfg.cfg_interval) {
        return Ok(vc);
    }
    let vu = field.velocity(x, t, false)?;
    guided_velocity(&vc, &vu, cfg.cfg_scale, t, cfg.cfg_interval)
}

/// Integrate from `x1` (t = 1) to t = 0 without clamping.
pub fn integrate(field: &dyn VelocityField, cfg: &SamplerConfig, x1: Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let sched = make_schedule(cfg.steps, cfg.shift_alpha)?;
    let mut x = x1;
    let mut history = DpmHistory::default();
    for (i, w) in sched.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let v = field_velocity(field, cfg, &x, t)?;
        x = match cfg.solver {
            Solver::Euler => euler_step(&x, t, t_next, &v),
            Solver::Heun => heun_step(&x, t, t_next, &v, &mut |y, s| field_velocity(field, cfg, y, s))?,
            Solver::FlowDpm => flow_dpm_step(&mut history, &x, t, t_next, &v),
        };
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "sampler state became non-finite at step {i} (t = {t} -> {t_next})"
            )));
        }
    }
    Ok(x)
}

/// Standard-normal starting noise for `cfg.seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rand::Rng::sample(&mut rng, StandardNormal))
}

/// Draw noise from the seed, integrate and clamp the result to [−1, 1].
pub fn sample(field: &dyn VelocityField, cfg: &SamplerConfig, shape: &[usize]) -> Result<Tensor> {
    let x = integrate(field, cfg, initial_noise(shape, cfg.seed))?;
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Sample images for `labels` from a model.
pub fn sample_model(model: &PixelDit, cfg: &SamplerConfig, labels: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&y| y > model.config.num_classes) {
        return Err(Error::Input(format!("class {bad} outside 0..={}", model.config.num_classes)));
    }
    let c = &model.config;
    let field = ModelField {
        model,
        labels: labels.to_vec(),
    };
    sample(&field, cfg, &[labels.len(), c.channels, c.height(), c.width()])
}
