use rand::Rng;

use super::adaln::ModulationParams;
use super::layers::{adaln_modulate, Attention, AttentionConfig, Linear, Mlp, RmsNorm};
use super::params::{Bound, ParamStore};
use crate::error::Result;
use crate::tensor::Var;

/// Patch-level transformer block conditioned on a global vector `c`.
///
/// ```text
/// s̄ = s + α₁ ⊙ Attn(γ₁ ⊙ RMSNorm(s) + β₁; RoPE)
/// s' = s̄ + α₂ ⊙ MLP(γ₂ ⊙ RMSNorm(s̄) + β₂)
/// ```
/// The six modulation vectors come from a zero-initialized linear head on
/// `SiLU(c)` and are broadcast to every token.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub norm1: RmsNorm,
    pub attn: Attention,
    pub norm2: RmsNorm,
    pub mlp: Mlp,
    pub adaln: Linear,
    pub width: usize,
}

impl DitBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        mlp_ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: RmsNorm::new(store, &format!("{name}.norm1"), width, rng)?,
            attn: Attention::new(store, &format!("{name}.attn"), width, rng)?,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), width, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, mlp_ratio, rng)?,
            adaln: Linear::zeros(store, &format!("{name}.adaln"), width, 6 * width, true, rng)?,
            width,
        })
    }

    /// `s: [B, L, D]`, `c: [B, 1, D]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        s: Var<'t>,
        c: Var<'t>,
        attn: &AttentionConfig,
    ) -> Result<Var<'t>> {
        let m = ModulationParams::split(self.adaln.forward(p, c.silu())?, self.width)?;
        let h = adaln_modulate(self.norm1.forward(p, s)?, m.gamma1, m.beta1)?;
        let s = s.add(self.attn.forward(p, h, attn)?.mul(m.alpha1)?)?;
        let h = adaln_modulate(self.norm2.forward(p, s)?, m.gamma2, m.beta2)?;
        s.add(self.mlp.forward(p, h)?.mul(m.alpha2)?)
    }
}
