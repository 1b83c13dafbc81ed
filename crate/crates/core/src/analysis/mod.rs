//! Closed-form parameter and FLOPs accounting, plus ablation sweeps.
//!
//! FLOPs follow the convention that one multiply-add costs two FLOPs. Only
//! matrix products are counted: linear layers and the two attention
//! contractions (QKᵀ and weights·V). Norms, activations, softmax, RoPE and
//! elementwise modulation are left out.

mod svg;
mod sweep;


pub use svg::{loss_chart_svg, Series};
pub use sweep::{
    class_sample_means, final_loss, run_ablation_sweep, sweep_csv, AblationSpec, SweepEntry, SweepOutcome, SweepRow,
    SWEEP_HEADER,
};

use crate::error::Result;
use crate::model::{ModelConfig, Variant};
use crate::nn::mlp_hidden;

/// Module groups reported by [`CostReport`], in a fixed order.
pub const MODULES: [&str; 8] = [
    "patch_embed",
    "conditioning",
    "patch_blocks",
    "repa_head",
    "pixel_embed",
    "pit_blocks",
    "pixel_head",
    "patch_head",
];

/// Parameter and compute totals for one configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub params_total: u64,
    /// `(module, count)` for every entry of [`MODULES`], zeros included.
    pub params_by_module: Vec<(String, u64)>,
    /// Forward FLOPs for one image.
    pub flops_forward: u64,
    pub flops_by_module: Vec<(String, u64)>,
    /// Quadratic attention terms (QKᵀ and weights·V) over all layers.
    pub attention_flops: u64,
    /// Sequence length of pixel-pathway attention (k·L), 0 when absent.
    pub attention_token_count: u64,
}

impl CostReport {
    pub fn module_params(&self, name: &str) -> u64 {
        lookup(&self.params_by_module, name)
    }

    pub fn module_flops(&self, name: &str) -> u64 {
        lookup(&self.flops_by_module, name)
    }

    /// One `key,value` line per field and module, for terminal output.
    pub fn rows(&self) -> Vec<(String, u64)> {
        let mut out = vec![("params_total".to_string(), self.params_total)];
        out.extend(self.params_by_module.iter().map(|(m, v)| (format!("params.{m}"), *v)));
        out.push(("flops_forward".into(), self.flops_forward));
        out.extend(self.flops_by_module.iter().map(|(m, v)| (format!("flops.{m}"), *v)));
        out.push(("attention_flops".into(), self.attention_flops));
        out.push(("attention_token_count".into(), self.attention_token_count));
        out
    }
}

fn lookup(table: &[(String, u64)], name: &str) -> u64 {
    table.iter().find(|(m, _)| m == name).map_or(0, |(_, v)| *v)
}

fn zeroed() -> Vec<(String, u64)> {
    MODULES.iter().map(|m| (m.to_string(), 0)).collect()
}

fn add(table: &mut [(String, u64)], name: &str, v: u64) {
    let slot = table.iter_mut().find(|(m, _)| m == name).expect("known module");
    slot.1 += v;
}

fn linear_params(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

/// Module group a parameter name belongs to.
pub fn module_of(param: &str) -> &'static str {
    let head = param.split('.').next().unwrap_or(param);
    match head {
        "patch_embed" => "patch_embed",
        "t_embed" | "cond" => "conditioning",
        "patch" => "patch_blocks",
        "repa" => "repa_head",
        "pixel_embed" => "pixel_embed",
        "pit" => "pit_blocks",
        "pixel_head" => "pixel_head",
        "patch_head" => "patch_head",
        _ => "other",
    }
}

fn mlp_params(dim: usize, ratio: f64) -> u64 {
    let h = mlp_hidden(dim, ratio);
    linear_params(dim, h) + linear_params(h, dim)
}

fn attention_params(width: usize) -> u64 {
    4 * linear_params(width, width)
}

/// Closed-form parameter count; flops fields are left at zero.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let c = config;
    let (d, dp) = (c.hidden, c.pixel_hidden);
    let mut by = zeroed();

    add(&mut by, "patch_embed", linear_params(c.patch_dim(), d));
    add(&mut by, "conditioning", 3 * linear_params(d, d) + ((c.num_classes + 1) * d) as u64);
    let dit = 2 * d as u64 + attention_params(d) + mlp_params(d, c.mlp_ratio) + linear_params(d, 6 * d);
    add(&mut by, "patch_blocks", c.patch_depth as u64 * dit);
    if let Some(r) = c.repa {
        add(&mut by, "repa_head", linear_params(d, d) + linear_params(d, r.feature_dim));
    }
    if c.variant.has_pixel_pathway() {
        let px = c.pixels_per_patch();
        let rows = c.variant.modulation_rows(c.patch_size);
        let mut pit = 2 * dp as u64 + linear_params(d, rows * 6 * dp) + mlp_params(dp, c.mlp_ratio);
        if c.variant.has_pixel_attention() {
            let kd = c.ptc_rate * d;
            pit += linear_params(px * dp, kd) + attention_params(d) + linear_params(kd, px * dp);
        }
        add(&mut by, "pixel_embed", linear_params(c.channels, dp));
        add(&mut by, "pit_blocks", c.pixel_depth as u64 * pit);
        add(&mut by, "pixel_head", linear_params(dp, c.channels));
    } else {
        add(&mut by, "patch_head", linear_params(d, c.patch_dim()));
    }
    Ok(CostReport {
        params_total: by.iter().map(|(_, v)| v).sum(),
        params_by_module: by,
        ..CostReport::default()
    })
}

/// FLOPs of `tokens` rows through an `i → o` linear layer.
fn linear_flops(tokens: usize, i: usize, o: usize) -> u64 {
    2 * (tokens * i * o) as u64
}

/// QKᵀ plus weights·V over `tokens` tokens of total width `width`.
pub fn attention_quadratic_flops(tokens: usize, width: usize) -> u64 {
    4 * (tokens as u64) * (tokens as u64) * width as u64
}

/// Quadratic attention cost of the pixel pathway with and without
/// compaction: `(uncompacted over H·W pixel tokens, compacted over k·L)`,
/// summed over the M pixel blocks at attention width D.
pub fn pixel_attention_quadratic(config: &ModelConfig) -> (u64, u64) {
    let m = config.pixel_depth as u64;
    let hw = config.height() * config.width();
    (
        m * attention_quadratic_flops(hw, config.hidden),
        m * attention_quadratic_flops(config.pixel_attention_tokens(), config.hidden),
    )
}

/// Parameter counts plus forward FLOPs for one image at `resolution`.
pub fn estimate_flops(config: &ModelConfig, resolution: [usize; 2]) -> Result<CostReport> {
    let c = ModelConfig {
        resolution,
        ..config.clone()
    };
    let mut report = count_params(&c)?;
    let (d, dp) = (c.hidden, c.pixel_hidden);
    let l = c.num_patches();
    let px = c.pixels_per_patch();
    let hw = l * px;
    let mut by = zeroed();
    let mut attn_quad = 0;

    add(&mut by, "patch_embed", linear_flops(l, c.patch_dim(), d));
    add(&mut by, "conditioning", 3 * linear_flops(1, d, d));
    let hid = mlp_hidden(d, c.mlp_ratio);
    let quad = attention_quadratic_flops(l, d);
    let dit = linear_flops(1, d, 6 * d) + 4 * linear_flops(l, d, d) + quad + 2 * linear_flops(l, d, hid);
    add(&mut by, "patch_blocks", c.patch_depth as u64 * dit);
    attn_quad += c.patch_depth as u64 * quad;
    if let Some(r) = c.repa {
        add(&mut by, "repa_head", linear_flops(l, d, d) + linear_flops(l, d, r.feature_dim));
    }
    if c.variant.has_pixel_pathway() {
        let rows = c.variant.modulation_rows(c.patch_size);
        let cond_tokens = if c.variant == Variant::AGlobal { 1 } else { l };
        let pix_hid = mlp_hidden(dp, c.mlp_ratio);
        let mut pit = linear_flops(cond_tokens, d, rows * 6 * dp) + 2 * linear_flops(hw, dp, pix_hid);
        if c.variant.has_pixel_attention() {
            let (k, t) = (c.ptc_rate, c.pixel_attention_tokens());
            let q = attention_quadratic_flops(t, d);
            pit += linear_flops(l, px * dp, k * d) + 4 * linear_flops(t, d, d) + q + linear_flops(l, k * d, px * dp);
            attn_quad += c.pixel_depth as u64 * q;
            report.attention_token_count = t as u64;
        }
        add(&mut by, "pixel_embed", linear_flops(hw, c.channels, dp));
        add(&mut by, "pit_blocks", c.pixel_depth as u64 * pit);
        add(&mut by, "pixel_head", linear_flops(hw, dp, c.channels));
    } else {
        add(&mut by, "patch_head", linear_flops(l, d, c.patch_dim()));
    }
    report.flops_forward = by.iter().map(|(_, v)| v).sum();
    report.flops_by_module = by;
    report.attention_flops = attn_quad;
    Ok(report)
}

/// Per-module element counts of a constructed parameter store.
pub fn measured_params(names: &[String], sizes: impl IntoIterator<Item = usize>) -> Vec<(String, u64)> {
    let mut by = zeroed();
    by.push(("other".into(), 0));
    for (n, s) in names.iter().zip(sizes) {
        let slot = by.iter_mut().find(|(m, _)| m == module_of(n)).expect("module");
        slot.1 += s as u64;
    }
    by
}
