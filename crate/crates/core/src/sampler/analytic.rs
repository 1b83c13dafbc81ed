use super::VelocityField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exact rectified-flow velocity between `N(0, I)` noise and a diagonal
/// Gaussian `N(μ, diag(s²))` of data.
///
/// Per coordinate, `v(x, t) = −μ + (t − (1−t)s²) / ((1−t)²s² + t²) · (x − (1−t)μ)`,
/// and the ODE carries `x₁` at t = 1 to `μ + s·x₁` at t = 0. The
/// unconditional branch swaps in `uncond_mean`, which makes guidance visible.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFlow {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub uncond_mean: Vec<f64>,
}

impl GaussianFlow {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let uncond_mean = vec![0.0; mean.len()];
        Self { mean, std, uncond_mean }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn coord(mu: f64, s: f64, x: f64, t: f64) -> f64 {
        let s2 = s * s;
        let a = 1.0 - t;
        -mu + (t - a * s2) / (a * a * s2 + t * t) * (x - a * mu)
    }

    /// Where the exact flow sends noise `x1`.
    pub fn endpoint(&self, x1: &Tensor) -> Tensor {
        let d = self.dim();
        Tensor::from_fn(x1.shape(), |i| self.mean[i % d] + self.std[i % d] * x1.data()[i])
    }
}

impl VelocityField for GaussianFlow {
    fn velocity(&self, x: &Tensor, t: f64, conditional: bool) -> Result<Tensor> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(Error::dim("gaussian flow", x.shape(), &[d]));
        }
        let means = if conditional { &self.mean } else { &self.uncond_mean };
        Ok(Tensor::from_fn(x.shape(), |i| {
            Self::coord(means[i % d], self.std[i % d], x.data()[i], t)
        }))
    }
}
