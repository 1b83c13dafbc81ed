use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Multiplier applied to `t ∈ [0, 1]` before the sinusoid, so the frequency
/// ladder spans the same range as integer-step diffusion models.
pub const TIMESTEP_SCALE: f64 = 1000.0;
pub const SINUSOID_BASE: f64 = 10_000.0;

/// `[cos(s·f_0) .. cos(s·f_{h-1}) | sin(s·f_0) .. sin(s·f_{h-1})]` with
/// `s = 1000·t`, `h = dim/2` and `f_i = 10000^(-i/h)`. Odd widths get a
/// trailing zero.
pub fn sinusoidal(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-SINUSOID_BASE.ln() * i as f64 / half as f64).exp())
        .collect();
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let s = ti * TIMESTEP_SCALE;
        data.extend(freqs.iter().map(|f| (s * f).cos()));
        data.extend(freqs.iter().map(|f| (s * f).sin()));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(&[t.len().max(1), dim], data).expect("sinusoid shape")
}

/// Conditioning signals for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'t> {
    /// `c = SiLU(W_t·t_emb + W_y[y] + b)`, `[B, 1, D]`.
    pub c: Var<'t>,
    /// Post-MLP timestep embedding, `[B, 1, D]`.
    pub t_emb: Var<'t>,
}

/// Timestep MLP plus class table.
#[derive(Clone, Debug)]
pub struct ConditionEmbedder {
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub w_t: Linear,
    /// `[num_classes + 1, D]`; the last row is the null class.
    pub class_table: ParamId,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ConditionEmbedder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            t_fc1: Linear::new(store, "t_embed.fc1", hidden, hidden, true, rng)?,
            t_fc2: Linear::new(store, "t_embed.fc2", hidden, hidden, true, rng)?,
            w_t: Linear::new(store, "cond.w_t", hidden, hidden, true, rng)?,
            class_table: store.register("cond.class_table", &[num_classes + 1, hidden], Init::Normal(0.02), rng)?,
            hidden,
            num_classes,
        })
    }

    pub fn numel(&self) -> usize {
        self.t_fc1.numel() + self.t_fc2.numel() + self.w_t.numel() + (self.num_classes + 1) * self.hidden
    }

    /// `t`: per-sample times, `y`: per-sample class ids (null id allowed).
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, t: &[f64], y: &[usize]) -> Result<Conditioning<'t>> {
        if t.len() != y.len() || t.is_empty() {
            return Err(Error::Input(format!(
                "conditioning needs one label per timestep, got {} times and {} labels",
                t.len(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&id| id > self.num_classes) {
            return Err(Error::Input(format!(
                "class id {bad} outside 0..={} (null id = {})",
                self.num_classes, self.num_classes
            )));
        }
        let b = t.len();
        let freq = tape.constant(sinusoidal(t, self.hidden));
        let t_emb = self.t_fc2.forward(p, self.t_fc1.forward(p, freq)?.silu())?;
        let class = p[self.class_table].gather_rows(y)?;
        let c = self.w_t.forward(p, t_emb)?.add(class)?.silu();
        Ok(Conditioning {
            c: c.reshape(&[b, 1, self.hidden])?,
            t_emb: t_emb.reshape(&[b, 1, self.hidden])?,
        })
    }
}
