//! Reusable network blocks: RMSNorm, axial RoPE, attention, MLP, AdaLN and the
//! patch-level DiT block.

mod adaln;
mod dit;
mod layers;
mod params;


pub use adaln::ModulationParams;
pub use dit::DitBlock;
pub use layers::{
    adaln_modulate, mlp_hidden, rms_norm, rope_2d, Attention, AttentionConfig, Linear, Mlp,
    RmsNorm, RMS_EPS, ROPE_BASE,
};
pub use params::{Bound, Init, ParamId, ParamStore};
