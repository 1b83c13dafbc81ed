use rand::Rng;

use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Affine map over the last axis; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(±1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, name, in_dim, out_dim, bias, Init::Uniform(bound), rng)
    }

    pub fn zeros<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::Zeros, rng)
    }

    fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "{name}: linear layer needs positive widths, got {in_dim} -> {out_dim}"
            )));
        }
        let weight = store.register(format!("{name}.weight"), &[in_dim, out_dim], init, rng)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), &[out_dim], init, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Learned-gain RMS normalization over the last axis.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), &[dim], Init::Ones, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        rms_norm(x, p[self.gain])
    }
}

/// `y = gain ⊙ x / sqrt(mean(x²) + 1e-6)` over the last axis.
pub fn rms_norm<'t>(x: Var<'t>, gain: Var<'t>) -> Result<Var<'t>> {
    x.rms_norm(gain, RMS_EPS)
}

/// Axial 2D rotary embedding with base 10000 over `[.., rows·cols, heads, head_dim]`.
pub fn rope_2d<'t>(x: Var<'t>, grid: (usize, usize)) -> Result<Var<'t>> {
    x.rope_2d(grid, ROPE_BASE)
}

/// `gamma ⊙ x_norm + beta`, with `gamma`/`beta` broadcast onto `x_norm`.
pub fn adaln_modulate<'t>(x_norm: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    x_norm.mul(gamma)?.add(beta)
}

/// Hidden width used for an MLP of expansion `ratio` over `dim`.
pub fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (ratio * dim as f64).round() as usize
}

/// linear → GELU (tanh approximation) → linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = mlp_hidden(dim, ratio);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu_tanh();
        self.fc2.forward(p, h)
    }
}

/// Shape of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub rope: bool,
    /// Token grid `(rows, cols)` for the rotary embedding.
    pub grid: (usize, usize),
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize, rope: bool, grid: (usize, usize)) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        let head_dim = width / heads;
        if rope && head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be divisible by 4 for 2D RoPE"
            )));
        }
        Ok(Self {
            heads,
            head_dim,
            rope,
            grid,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Multi-head self-attention with separate Q/K/V/O projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true, rng)?,
        })
    }

    /// `x: [B, T, D]` → `[B, T, D]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, cfg: &AttentionConfig) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != cfg.width() {
            return Err(Error::Shape(format!(
                "attention input {shape:?} for width {}",
                cfg.width()
            )));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, hd) = (cfg.heads, cfg.head_dim);
        let split = |y: Var<'t>| -> Result<Var<'t>> {
            let y = y.reshape(&[b, t, h, hd])?;
            if cfg.rope {
                rope_2d(y, cfg.grid)
            } else {
                Ok(y)
            }
        };
        let q = split(self.q.forward(p, x)?)?.permute(&[0, 2, 1, 3])?;
        let k = split(self.k.forward(p, x)?)?.permute(&[0, 2, 3, 1])?;
        let v = self.v.forward(p, x)?.reshape(&[b, t, h, hd])?.permute(&[0, 2, 1, 3])?;
        let weights = q.matmul(k)?.scale(1.0 / (hd as f64).sqrt()).softmax_lastdim();
        let ctx = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        self.o.forward(p, ctx)
    }
}
