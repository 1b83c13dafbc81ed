use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HandoffSource, ModelConfig, Variant};
use super::embed::{ConditionEmbedder, Conditioning};
use super::patch::{patchify, unpatchify};
use super::pit::{PitBlock, PitShape};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Bound, DitBlock, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput<'t> {
    /// Predicted velocity, `[B, C, H, W]`.
    pub velocity: Var<'t>,
    /// Projected tokens from the REPA tap, `[B, L, F]`, when alignment is configured.
    pub repa: Option<Var<'t>>,
}

/// Alignment projector: D → D, SiLU, → F.
#[derive(Clone, Debug)]
pub struct RepaHead {
    pub fc1: Linear,
    pub fc2: Linear,
    /// 1-based block index whose output is tapped.
    pub tap: usize,
}

/// The dual-level diffusion transformer.
///
/// Parameters live in [`PixelDit::params`]; the remaining fields are layer
/// descriptors holding [`crate::nn::ParamId`]s into that store.
#[derive(Clone, Debug)]
pub struct PixelDit {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub patch_embed: Linear,
    pub cond: ConditionEmbedder,
    pub patch_blocks: Vec<DitBlock>,
    pub pixel_embed: Option<Linear>,
    pub pit_blocks: Vec<PitBlock>,
    pub pixel_head: Option<Linear>,
    pub patch_head: Option<Linear>,
    pub repa: Option<RepaHead>,
    patch_attn: AttentionConfig,
    pixel_attn: Option<AttentionConfig>,
}

impl PixelDit {
    /// Build and initialize every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamStore::new(), seed)
    }

    /// Names and shapes of every parameter without allocating them.
    pub fn param_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let m = Self::build(config.clone(), ParamStore::shape_only(), 0)?;
        Ok(m.params.names().iter().cloned().zip(m.params.shapes().iter().cloned()).collect())
    }

    fn build(config: ModelConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (d, dp) = (config.hidden, config.pixel_hidden);

        let patch_embed = Linear::new(&mut store, "patch_embed", config.patch_dim(), d, true, rng)?;
        let cond = ConditionEmbedder::new(&mut store, d, config.num_classes, rng)?;
        let patch_blocks = (0..config.patch_depth)
            .map(|i| DitBlock::new(&mut store, &format!("patch.{i}"), d, config.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let repa = match (config.repa, config.repa_tap()) {
            (Some(r), Some(tap)) => Some(RepaHead {
                fc1: Linear::new(&mut store, "repa.fc1", d, d, true, rng)?,
                fc2: Linear::new(&mut store, "repa.fc2", d, r.feature_dim, true, rng)?,
                tap,
            }),
            _ => None,
        };

        let (mut pixel_embed, mut pit_blocks, mut pixel_head, mut patch_head) = (None, Vec::new(), None, None);
        if config.variant.has_pixel_pathway() {
            pixel_embed = Some(Linear::new(&mut store, "pixel_embed", config.channels, dp, true, rng)?);
            let shape = PitShape {
                hidden: d,
                pixel_hidden: dp,
                pixels: config.pixels_per_patch(),
                ptc_rate: config.ptc_rate,
                mlp_ratio: config.mlp_ratio,
                variant: config.variant,
            };
            for j in 0..config.pixel_depth {
                pit_blocks.push(PitBlock::new(&mut store, &format!("pit.{j}"), shape, rng)?);
            }
            pixel_head = Some(Linear::zeros(&mut store, "pixel_head", dp, config.channels, true, rng)?);
        } else {
            patch_head = Some(Linear::zeros(&mut store, "patch_head", d, config.patch_dim(), true, rng)?);
        }

        Ok(Self {
            patch_attn: config.patch_attention()?,
            pixel_attn: if config.variant.has_pixel_attention() {
                Some(config.pixel_attention()?)
            } else {
                None
            },
            config,
            params: store,
            patch_embed,
            cond,
            patch_blocks,
            pixel_embed,
            pit_blocks,
            pixel_head,
            patch_head,
            repa,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Attention shape used inside the pixel pathway, if it attends at all.
    pub fn pixel_attention(&self) -> Option<&AttentionConfig> {
        self.pixel_attn.as_ref()
    }

    /// Sequence length seen by pixel-pathway attention (0 when absent).
    pub fn pixel_attention_tokens(&self) -> usize {
        self.pixel_attn.map_or(0, |a| a.grid.0 * a.grid.1)
    }

    fn check_input(&self, shape: &[usize], t: &[f64], y: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.height(), c.width()];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape(format!(
                "model expects [B, {}, {}, {}], got {shape:?}",
                want[0], want[1], want[2]
            )));
        }
        if t.len() != shape[0] || y.len() != shape[0] {
            return Err(Error::Input(format!(
                "batch of {} needs as many timesteps and labels, got {} and {}",
                shape[0],
                t.len(),
                y.len()
            )));
        }
        Ok(())
    }

    /// `c` and the timestep embedding for a batch.
    pub fn embed_condition<'t>(&self, tape: &'t Tape, p: &Bound<'t>, t: &[f64], y: &[usize]) -> Result<Conditioning<'t>> {
        self.cond.forward(tape, p, t, y)
    }

    /// Patchify, project and run the N patch blocks; also returns the tapped
    /// block output for alignment.
    pub fn patch_pathway<'t>(&self, p: &Bound<'t>, x: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let mut s = self.patch_embed.forward(p, patchify(x, self.config.patch_size)?)?;
        let mut tapped = None;
        for (i, block) in self.patch_blocks.iter().enumerate() {
            s = block.forward(p, s, c, &self.patch_attn)?;
            if self.repa.as_ref().is_some_and(|r| r.tap == i + 1) {
                tapped = Some(s);
            }
        }
        Ok((s, tapped))
    }

    /// `s_cond = s_N + t`, with `t` chosen by the configured handoff source.
    pub fn semantic_handoff<'t>(&self, s_n: Var<'t>, cond: &Conditioning<'t>) -> Result<Var<'t>> {
        match self.config.handoff {
            HandoffSource::TimestepEmbedding => s_n.add(cond.t_emb),
            HandoffSource::Conditioning => s_n.add(cond.c),
        }
    }

    /// One token per pixel: `[B, C, H, W]` → `[B, L, p², D_pix]`.
    pub fn pixel_tokens<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let embed = self
            .pixel_embed
            .as_ref()
            .ok_or_else(|| Error::Config("vanilla_dit has no pixel embedder".into()))?;
        let cfg = &self.config;
        let b = x.shape()[0];
        let px = patchify(x, cfg.patch_size)?.reshape(&[b, cfg.num_patches(), cfg.pixels_per_patch(), cfg.channels])?;
        embed.forward(p, px)
    }

    /// Run the M pixel blocks on `tokens: [B, L, p², D_pix]` conditioned on
    /// `cond` (`[B, 1, D]` for the global variant, `[B, L, D]` otherwise).
    pub fn pixel_pathway<'t>(&self, p: &Bound<'t>, tokens: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let fallback;
        let attn = match &self.pixel_attn {
            Some(a) => a,
            None => {
                fallback = self.patch_attn;
                &fallback
            }
        };
        self.pit_blocks
            .iter()
            .try_fold(tokens, |x, block| block.forward(p, x, cond, attn))
    }

    /// Predict the velocity for `x_t` at times `t` with labels `y`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x_t: Var<'t>,
        t: &[f64],
        y: &[usize],
    ) -> Result<ModelOutput<'t>> {
        let shape = x_t.shape();
        self.check_input(&shape, t, y)?;
        let cfg = &self.config;
        let (b, hw) = (shape[0], (cfg.height(), cfg.width()));
        let cond = self.embed_condition(tape, p, t, y)?;
        let (s_n, tapped) = self.patch_pathway(p, x_t, cond.c)?;
        let repa = match (&self.repa, tapped) {
            (Some(head), Some(s)) => Some(head.fc2.forward(p, head.fc1.forward(p, s)?.silu())?),
            _ => None,
        };

        let velocity = match cfg.variant {
            Variant::VanillaDit => {
                let head = self.patch_head.as_ref().expect("vanilla head");
                unpatchify(head.forward(p, s_n)?, cfg.patch_size, cfg.channels, hw)?
            }
            variant => {
                let pix_cond = match variant {
                    Variant::AGlobal => cond.c,
                    _ => self.semantic_handoff(s_n, &cond)?,
                };
                let x = self.pixel_pathway(p, self.pixel_tokens(p, x_t)?, pix_cond)?;
                let head = self.pixel_head.as_ref().expect("pixel head");
                let out = head.forward(p, x)?.reshape(&[b, cfg.num_patches(), cfg.patch_dim()])?;
                unpatchify(out, cfg.patch_size, cfg.channels, hw)?
            }
        };
        Ok(ModelOutput { velocity, repa })
    }

    /// Inference-only velocity with frozen parameters.
    pub fn velocity(&self, x_t: &Tensor, t: &[f64], y: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&tape, &p, tape.constant(x_t.clone()), t, y)?;
        let v = out.velocity.value();
        Ok((*v).clone())
    }
}
