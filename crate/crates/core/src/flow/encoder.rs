use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::patchify_tensor;
use crate::tensor::Tensor;

/// A frozen feature extractor producing one vector per patch.
pub trait AlignmentEncoder {
    fn feature_dim(&self) -> usize;
    /// Clean images `[B, C, H, W]` → features `[B, L, F]`.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
}

/// Seeded random projection of each flattened patch, layer-normalized.
#[derive(Clone, Debug)]
pub struct ToyAlignmentEncoder {
    pub patch_size: usize,
    pub channels: usize,
    /// `[p²·C, F]`.
    pub projection: Tensor,
}

impl ToyAlignmentEncoder {
    pub fn new(patch_size: usize, channels: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if patch_size == 0 || channels == 0 || feature_dim == 0 {
            return Err(Error::Config("toy encoder needs positive sizes".into()));
        }
        let rows = patch_size * patch_size * channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            patch_size,
            channels,
            projection: Tensor::randn(&[rows, feature_dim], 1.0 / (rows as f64).sqrt(), &mut rng),
        })
    }
}

impl AlignmentEncoder for ToyAlignmentEncoder {
    fn feature_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        if images.ndim() != 4 || images.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "toy encoder expects [B, {}, H, W], got {:?}",
                self.channels,
                images.shape()
            )));
        }
        let tokens = patchify_tensor(images, self.patch_size)?;
        let (b, l, k) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        let f = self.feature_dim();
        let w = self.projection.data();
        let mut out = Vec::with_capacity(b * l * f);
        for row in tokens.data().chunks(k) {
            let proj: Vec<f64> = (0..f)
                .map(|j| row.iter().enumerate().map(|(i, x)| x * w[i * f + j]).sum())
                .collect();
            let mu = proj.iter().sum::<f64>() / f as f64;
            let var = proj.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + 1e-6).sqrt();
            out.extend(proj.iter().map(|v| (v - mu) * inv));
        }
        Tensor::new(&[b, l, f], out)
    }
}
