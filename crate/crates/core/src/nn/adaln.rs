use crate::error::{Error, Result};
use crate::tensor::Var;

/// The six AdaLN groups `(β₁, γ₁, α₁, β₂, γ₂, α₂)`.
///
/// Each group shares the leading extents of the tensor it was split from, so
/// a global head yields `[B, 1, D]`, a patch-wise head `[B, L, 1, D_pix]` and a
/// pixel-wise head `[B, L, p², D_pix]`.
#[derive(Clone, Copy, Debug)]
pub struct ModulationParams<'t> {
    pub beta1: Var<'t>,
    pub gamma1: Var<'t>,
    pub alpha1: Var<'t>,
    pub beta2: Var<'t>,
    pub gamma2: Var<'t>,
    pub alpha2: Var<'t>,
}

impl<'t> ModulationParams<'t> {
    /// Partition the last axis of `theta` (width `6·width`) into six groups.
    pub fn split(theta: Var<'t>, width: usize) -> Result<Self> {
        let last = *theta.shape().last().unwrap_or(&0);
        if last != 6 * width {
            return Err(Error::Config(format!(
                "modulation head emits {last} values per token, expected 6 x {width}"
            )));
        }
        let g = |i: usize| theta.narrow_lastdim(i * width, width);
        Ok(Self {
            beta1: g(0)?,
            gamma1: g(1)?,
            alpha1: g(2)?,
            beta2: g(3)?,
            gamma2: g(4)?,
            alpha2: g(5)?,
        })
    }

    pub fn groups(&self) -> [Var<'t>; 6] {
        [
            self.beta1,
            self.gamma1,
            self.alpha1,
            self.beta2,
            self.gamma2,
            self.alpha2,
        ]
    }
}
