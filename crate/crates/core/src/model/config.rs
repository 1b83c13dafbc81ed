use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AttentionConfig;

/// How the pixel pathway is conditioned, or whether it exists at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One modulation set per image, projected from `c`.
    AGlobal,
    /// One modulation set per patch, shared by its p² pixels.
    BPatchwise,
    /// A distinct modulation set for every pixel.
    #[default]
    CPixelwise,
    /// Pixel-wise AdaLN and MLP only; the compact/attend/expand branch is removed.
    NoPixelAttention,
    /// No pixel pathway; a linear patch head predicts p²·C values per token.
    VanillaDit,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::AGlobal,
        Variant::BPatchwise,
        Variant::CPixelwise,
        Variant::NoPixelAttention,
        Variant::VanillaDit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AGlobal => "a_global",
            Variant::BPatchwise => "b_patchwise",
            Variant::CPixelwise => "c_pixelwise",
            Variant::NoPixelAttention => "no_pixel_attention",
            Variant::VanillaDit => "vanilla_dit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn has_pixel_pathway(self) -> bool {
        self != Variant::VanillaDit
    }

    pub fn has_pixel_attention(self) -> bool {
        matches!(self, Variant::AGlobal | Variant::BPatchwise | Variant::CPixelwise)
    }

    /// Number of modulation sets per patch emitted by Φ (p² for pixel-wise).
    pub fn modulation_rows(self, patch: usize) -> usize {
        match self {
            Variant::CPixelwise | Variant::NoPixelAttention => patch * patch,
            _ => 1,
        }
    }
}

/// Which timestep signal is added to `s_N` to form `s_cond`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffSource {
    /// The post-MLP timestep embedding, before the class is added.
    #[default]
    TimestepEmbedding,
    /// The full conditioning vector `c`.
    Conditioning,
}

/// Alignment head attached to an intermediate patch block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepaConfig {
    /// Width F of the frozen encoder features.
    pub feature_dim: usize,
    /// 1-based index of the tapped patch block; defaults to `min(8, N)`.
    #[serde(default)]
    pub tap_block: Option<usize>,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

fn default_ptc_rate() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// N, the number of patch-level blocks.
    pub patch_depth: usize,
    /// M, the number of pixel-level blocks.
    pub pixel_depth: usize,
    /// D.
    pub hidden: usize,
    /// D_pix.
    pub pixel_hidden: usize,
    /// p.
    pub patch_size: usize,
    pub heads: usize,
    /// Real classes; id `num_classes` is the null class.
    pub num_classes: usize,
    /// (H, W).
    pub resolution: [usize; 2],
    pub channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub variant: Variant,
    /// Compacted tokens per patch (k).
    #[serde(default = "default_ptc_rate")]
    pub ptc_rate: usize,
    /// 2D RoPE in the pixel pathway's attention.
    #[serde(default = "default_true")]
    pub pixel_rope: bool,
    #[serde(default)]
    pub handoff: HandoffSource,
    #[serde(default)]
    pub repa: Option<RepaConfig>,
}

impl ModelConfig {
    fn preset(patch_depth: usize, pixel_depth: usize, hidden: usize, heads: usize) -> Self {
        Self {
            patch_depth,
            pixel_depth,
            hidden,
            pixel_hidden: 16,
            patch_size: 16,
            heads,
            num_classes: 1000,
            resolution: [256, 256],
            channels: 3,
            mlp_ratio: 4.0,
            variant: Variant::CPixelwise,
            ptc_rate: 1,
            pixel_rope: true,
            handoff: HandoffSource::TimestepEmbedding,
            repa: None,
        }
    }

    pub fn preset_b() -> Self {
        Self::preset(12, 2, 768, 12)
    }

    pub fn preset_l() -> Self {
        Self::preset(22, 4, 1024, 16)
    }

    pub fn preset_xl() -> Self {
        Self::preset(26, 4, 1152, 16)
    }

    /// `B`, `L` or `XL` (case-insensitive).
    pub fn from_preset(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "B" => Ok(Self::preset_b()),
            "L" => Ok(Self::preset_l()),
            "XL" => Ok(Self::preset_xl()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected B, L or XL"))),
        }
    }

    /// Smallest configuration used for end-to-end gradient checks.
    pub fn toy() -> Self {
        Self {
            patch_depth: 2,
            pixel_depth: 2,
            hidden: 16,
            pixel_hidden: 4,
            patch_size: 2,
            heads: 2,
            num_classes: 3,
            resolution: [8, 8],
            channels: 3,
            ..Self::preset_b()
        }
    }

    pub fn height(&self) -> usize {
        self.resolution[0]
    }

    pub fn width(&self) -> usize {
        self.resolution[1]
    }

    /// Patch grid `(H/p, W/p)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height() / self.patch_size, self.width() / self.patch_size)
    }

    /// L = (H/p)(W/p).
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// p².
    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// p²·C, the length of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        self.pixels_per_patch() * self.channels
    }

    /// Tokens attended over in the pixel pathway (k·L).
    pub fn pixel_attention_tokens(&self) -> usize {
        self.ptc_rate * self.num_patches()
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    /// Resolved REPA tap (1-based block index), if alignment is configured.
    pub fn repa_tap(&self) -> Option<usize> {
        self.repa
            .map(|r| r.tap_block.unwrap_or(self.patch_depth.min(8)))
    }

    pub fn patch_attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.hidden, self.heads, true, self.grid())
    }

    /// Attention over the compacted pixel tokens; each patch contributes k
    /// adjacent columns to the RoPE grid.
    pub fn pixel_attention(&self) -> Result<AttentionConfig> {
        let (r, c) = self.grid();
        AttentionConfig::new(self.hidden, self.heads, self.pixel_rope, (r, c * self.ptc_rate))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("hidden", self.hidden),
            ("pixel_hidden", self.pixel_hidden),
            ("patch_size", self.patch_size),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
            ("ptc_rate", self.ptc_rate),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let [h, w] = self.resolution;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return bad(format!(
                "resolution {h}x{w} is not divisible by patch size {}",
                self.patch_size
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        self.patch_attention()?;
        if self.variant.has_pixel_attention() {
            self.pixel_attention()?;
        }
        match self.variant {
            Variant::VanillaDit if self.pixel_depth != 0 => {
                return bad("vanilla_dit has no pixel pathway; set pixel_depth = 0".into())
            }
            Variant::VanillaDit | Variant::NoPixelAttention if self.ptc_rate != 1 => {
                return bad(format!(
                    "{} performs no token compaction; ptc_rate must be 1",
                    self.variant.name()
                ))
            }
            _ => {}
        }
        if let Some(r) = self.repa {
            if r.feature_dim == 0 {
                return bad("repa.feature_dim must be positive".into());
            }
            let tap = self.repa_tap().unwrap_or(0);
            if tap == 0 || tap > self.patch_depth {
                return bad(format!(
                    "repa tap block {tap} outside 1..={}",
                    self.patch_depth
                ));
            }
        }
        Ok(())
    }
}
