//! The dual-level model: patch pathway, semantic handoff and pixel pathway.

pub mod checkpoint;
mod config;
mod embed;
mod patch;
mod pit;
mod pixeldit;
#[cfg(test)]
mod tests;

pub use checkpoint::{model_header, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, PARAM_PREFIX};
pub use config::{HandoffSource, ModelConfig, RepaConfig, Variant};
pub use embed::{sinusoidal, ConditionEmbedder, Conditioning, SINUSOID_BASE, TIMESTEP_SCALE};
pub use patch::{patchify, patchify_tensor, unpatchify, unpatchify_tensor};
pub use pit::{pixel_adaln_params, PitBlock, PitShape};
pub use pixeldit::{ModelOutput, PixelDit, RepaHead};
