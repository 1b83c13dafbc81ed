//! Class-conditional toy image datasets and netpbm image files.

mod netpbm;

pub use netpbm::{decode_netpbm, encode_netpbm, read_image, write_image, NetpbmFormat};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Amplitude of the per-class colors, blobs and checkerboards.
pub const TOY_AMPLITUDE: f64 = 0.8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Flat image in a class color.
    #[default]
    SolidColor,
    /// Bright bump on a dark field; the class sets the bump position.
    GaussianBlob,
    /// Checkerboard whose spatial frequency grows with the class id.
    CheckerboardFreq,
}

fn default_channels() -> usize {
    3
}

/// Recipe for a synthetic class-labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetSpec {
    #[serde(default)]
    pub kind: ToyKind,
    pub num_classes: usize,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            kind: ToyKind::SolidColor,
            num_classes: 3,
            resolution: [16, 16],
            channels: 3,
            samples_per_class: 256,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Sign patterns over (R, G, B) for the first eight class colors.
const COLOR_PATTERNS: [[bool; 3]; 8] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [false, true, true],
    [true, false, true],
    [true, true, true],
    [false, false, false],
];

/// Color of class `k` for `solid_color`: ±0.8 per channel, halving the
/// amplitude every eight classes so that colors stay distinct.
pub fn class_color(k: usize, channels: usize) -> Vec<f64> {
    let pattern = COLOR_PATTERNS[k % 8];
    let amp = TOY_AMPLITUDE / (1u64 << (k / 8).min(50)) as f64;
    (0..channels)
        .map(|c| if pattern[c % 3] { amp } else { -amp })
        .collect()
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.resolution;
        if self.num_classes == 0 || h == 0 || w == 0 || self.channels == 0 {
            return Err(Error::Config("toy dataset needs classes, channels and a non-empty resolution".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Noise-free image of class `k`, shape `[C, H, W]`.
    pub fn template(&self, k: usize) -> Result<Tensor> {
        if k >= self.num_classes {
            return Err(Error::Input(format!("class {k} outside 0..{}", self.num_classes)));
        }
        let [h, w] = self.resolution;
        let c = self.channels;
        let shape = [c, h, w];
        Ok(match self.kind {
            ToyKind::SolidColor => {
                let color = class_color(k, c);
                Tensor::from_fn(&shape, |i| color[i / (h * w)])
            }
            ToyKind::GaussianBlob => {
                let side = h.min(w) as f64;
                let angle = 2.0 * std::f64::consts::PI * k as f64 / self.num_classes as f64;
                let (cy, cx) = (
                    (h as f64 - 1.0) / 2.0 + 0.25 * side * angle.sin(),
                    (w as f64 - 1.0) / 2.0 + 0.25 * side * angle.cos(),
                );
                let sigma = (side / 8.0).max(0.5);
                Tensor::from_fn(&shape, |i| {
                    let (y, x) = (((i / w) % h) as f64, (i % w) as f64);
                    let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                    TOY_AMPLITUDE * (2.0 * (-r2 / (2.0 * sigma * sigma)).exp() - 1.0)
                })
            }
            ToyKind::CheckerboardFreq => {
                let f = (k + 1) as f64;
                Tensor::from_fn(&shape, |i| {
                    let (y, x) = (((i / w) % h) as f64 + 0.5, (i % w) as f64 + 0.5);
                    let s = (std::f64::consts::PI * f * y / h as f64).sin()
                        * (std::f64::consts::PI * f * x / w as f64).sin();
                    if s >= 0.0 {
                        TOY_AMPLITUDE
                    } else {
                        -TOY_AMPLITUDE
                    }
                })
            }
        })
    }
}

/// Images for `class_ids`, `[B, C, H, W]` in [−1, 1]: class template plus
/// `N(0, noise_std)` drawn from `rng`, clamped.
pub fn generate_toy_batch<R: Rng + ?Sized>(spec: &ToyDatasetSpec, class_ids: &[usize], rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let [h, w] = spec.resolution;
    let mut data = Vec::with_capacity(class_ids.len() * spec.channels * h * w);
    for &k in class_ids {
        let t = spec.template(k)?;
        data.extend(t.data().iter().map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + spec.noise_std * n).clamp(-1.0, 1.0)
        }));
    }
    Tensor::new(&[class_ids.len(), spec.channels, h, w], data)
}

/// A materialized dataset. Sample `i` has class `i % num_classes` and noise
/// from its own ChaCha stream, so it depends only on `(seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(spec: &ToyDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.len();
        let [h, w] = spec.resolution;
        let per = spec.channels * h * w;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % spec.num_classes;
            data.extend_from_slice(sample_image(spec, i, k)?.data());
            labels.push(k);
        }
        Ok(Self {
            spec: spec.clone(),
            images: Tensor::new(&[n, spec.channels, h, w], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather `indices` into a `[B, C, H, W]` batch with labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut shape = self.images.shape().to_vec();
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        shape[0] = indices.len();
        Ok((Tensor::new(&shape, data)?, labels))
    }
}

/// Sample `index` of the dataset described by `spec`, with class `k`.
pub fn sample_image(spec: &ToyDatasetSpec, index: usize, k: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let b = generate_toy_batch(spec, &[k], &mut rng)?;
    let s = b.shape()[1..].to_vec();
    b.reshape(&s)
}
