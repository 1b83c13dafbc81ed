use rand::Rng;

use super::config::Variant;
use crate::error::{Error, Result};
use crate::nn::{
    adaln_modulate, Attention, AttentionConfig, Bound, Linear, Mlp, ModulationParams, ParamStore, RmsNorm,
};
use crate::tensor::Var;

/// Shapes shared by every pixel-level block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitShape {
    pub hidden: usize,
    pub pixel_hidden: usize,
    /// p².
    pub pixels: usize,
    /// k, compacted tokens per patch.
    pub ptc_rate: usize,
    pub mlp_ratio: f64,
    pub variant: Variant,
}

impl PitShape {
    /// Width of Φ's output: `rows · 6 · D_pix`.
    pub fn phi_width(&self) -> usize {
        self.modulation_rows() * 6 * self.pixel_hidden
    }

    pub fn modulation_rows(&self) -> usize {
        match self.variant {
            Variant::CPixelwise | Variant::NoPixelAttention => self.pixels,
            _ => 1,
        }
    }
}

/// Reshape Φ's output `[B, T, rows·6·D_pix]` into six `[B, T, rows, D_pix]`
/// groups in the order (β₁, γ₁, α₁, β₂, γ₂, α₂).
pub fn pixel_adaln_params<'t>(theta: Var<'t>, rows: usize, pixel_hidden: usize) -> Result<ModulationParams<'t>> {
    let shape = theta.shape();
    let last = *shape.last().unwrap_or(&0);
    if shape.len() != 3 || last != rows * 6 * pixel_hidden {
        return Err(Error::Config(format!(
            "modulation projection emits {shape:?}, expected [B, T, {rows} x 6 x {pixel_hidden}]"
        )));
    }
    let theta = theta.reshape(&[shape[0], shape[1], rows, 6 * pixel_hidden])?;
    ModulationParams::split(theta, pixel_hidden)
}

/// One pixel-level transformer block.
///
/// Pixel tokens `X: [B, L, p², D_pix]` are normalized and modulated per pixel,
/// compacted to `k` tokens of width `D` per patch, attended over the `k·L`
/// compacted tokens, expanded back and gated into the residual. A per-pixel
/// MLP follows.
#[derive(Clone, Debug)]
pub struct PitBlock {
    pub norm1: RmsNorm,
    pub norm2: RmsNorm,
    pub phi: Linear,
    pub compact: Option<Linear>,
    pub attn: Option<Attention>,
    pub expand: Option<Linear>,
    pub mlp: Mlp,
    pub shape: PitShape,
}

impl PitBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: PitShape, rng: &mut R) -> Result<Self> {
        let (d, dp, px, k) = (shape.hidden, shape.pixel_hidden, shape.pixels, shape.ptc_rate);
        let norm1 = RmsNorm::new(store, &format!("{name}.norm1"), dp, rng)?;
        let phi = Linear::zeros(store, &format!("{name}.phi"), d, shape.phi_width(), true, rng)?;
        let (compact, attn, expand) = if shape.variant.has_pixel_attention() {
            (
                Some(Linear::new(store, &format!("{name}.compact"), px * dp, k * d, true, rng)?),
                Some(Attention::new(store, &format!("{name}.attn"), d, rng)?),
                Some(Linear::new(store, &format!("{name}.expand"), k * d, px * dp, true, rng)?),
            )
        } else {
            (None, None, None)
        };
        Ok(Self {
            norm1,
            norm2: RmsNorm::new(store, &format!("{name}.norm2"), dp, rng)?,
            phi,
            compact,
            attn,
            expand,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dp, shape.mlp_ratio, rng)?,
            shape,
        })
    }

    /// Modulation sets from the conditioning tokens `cond: [B, T, D]`, where
    /// `T` is 1 for the global variant and L otherwise.
    pub fn modulation<'t>(&self, p: &Bound<'t>, cond: Var<'t>) -> Result<ModulationParams<'t>> {
        let theta = self.phi.forward(p, cond)?;
        pixel_adaln_params(theta, self.shape.modulation_rows(), self.shape.pixel_hidden)
    }

    /// `x: [B, L, p², D_pix]`; returns the same shape.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        cond: Var<'t>,
        attn_cfg: &AttentionConfig,
    ) -> Result<Var<'t>> {
        let m = self.modulation(p, cond)?;
        let x = match (&self.compact, &self.attn, &self.expand) {
            (Some(compact), Some(attn), Some(expand)) => {
                let shape = x.shape();
                let (b, l) = (shape[0], shape[1]);
                let (d, k) = (self.shape.hidden, self.shape.ptc_rate);
                let flat = self.shape.pixels * self.shape.pixel_hidden;
                let h = adaln_modulate(self.norm1.forward(p, x)?, m.gamma1, m.beta1)?;
                let u = compact.forward(p, h.reshape(&[b, l, flat])?)?.reshape(&[b, l * k, d])?;
                let a = attn.forward(p, u, attn_cfg)?.reshape(&[b, l, k * d])?;
                let y = expand.forward(p, a)?.reshape(&shape)?;
                x.add(y.mul(m.alpha1)?)?
            }
            _ => x,
        };
        let h = adaln_modulate(self.norm2.forward(p, x)?, m.gamma2, m.beta2)?;
        x.add(self.mlp.forward(p, h)?.mul(m.alpha2)?)
    }
}
