//! Finite-difference gradient suite over every primitive, both block types
//! and the end-to-end toy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{loss_diffusion, loss_repa};
use crate::model::{ModelConfig, PitBlock, PitShape, PixelDit, Variant};
use crate::nn::{AttentionConfig, Bound, DitBlock, ParamStore};
use crate::tensor::{grad_check_report, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed random weights make every output coordinate matter to the loss.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(randn(&y.shape(), seed ^ 0x9e37));
    y.mul(w).map(Var::sum_all)
}

fn case<F>(name: &str, f: F, inputs: &[Tensor], step: f64) -> Result<GradCase>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let r = grad_check_report(f, inputs, step)?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
    })
}

/// Replace every parameter with small Gaussian values so gates are open.
fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, std, &mut rng);
    }
}

/// Only the zero-initialized tensors (gates, modulation, heads) get values.
fn open_gates(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, std, &mut rng);
        }
    }
}

fn primitive_cases() -> Result<Vec<GradCase>> {
    let h = 1e-5;
    let x = randn(&[2, 3, 4], 1);
    let y = randn(&[2, 3, 4], 2);
    let row = randn(&[1, 3, 4], 3);
    let mut out = Vec::new();
    type Unary = for<'t> fn(Var<'t>) -> Result<Var<'t>>;
    let unary: [(&str, Unary); 8] = [
        ("silu", |v| Ok(v.silu())),
        ("gelu_tanh", |v| Ok(v.gelu_tanh())),
        ("exp", |v| Ok(v.exp())),
        ("softmax", |v| Ok(v.softmax_lastdim())),
        ("scale", |v| Ok(v.scale(-1.7))),
        ("square", |v| Ok(v.square())),
        ("reshape+permute", |v| v.reshape(&[6, 4])?.permute(&[1, 0])),
        ("narrow", |v| v.narrow_lastdim(1, 2)),
    ];
    for (name, f) in unary {
        out.push(case(name, |t, v| weighted(t, f(v[0])?, 11), std::slice::from_ref(&x), h)?);
    }
    type Binary = for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>;
    let binary: [(&str, Binary); 3] = [("add", |a, b| a.add(b)), ("sub", |a, b| a.sub(b)), ("mul", |a, b| a.mul(b))];
    for (name, f) in binary {
        out.push(case(name, |t, v| weighted(t, f(v[0], v[1])?, 12), &[x.clone(), y.clone()], h)?);
        let bname = format!("{name} (broadcast)");
        out.push(case(&bname, |t, v| weighted(t, f(v[0], v[1])?, 13), &[x.clone(), row.clone()], h)?);
    }
    out.push(case(
        "matmul (batched)",
        |t, v| weighted(t, v[0].matmul(v[1])?, 14),
        &[randn(&[2, 3, 4], 4), randn(&[2, 4, 5], 5)],
        h,
    )?);
    out.push(case(
        "matmul (shared rhs)",
        |t, v| weighted(t, v[0].matmul(v[1])?, 15),
        &[randn(&[2, 3, 4], 6), randn(&[4, 5], 7)],
        h,
    )?);
    out.push(case(
        "rms_norm",
        |t, v| weighted(t, v[0].rms_norm(v[1], 1e-6)?, 16),
        &[x.clone(), randn(&[4], 8)],
        h,
    )?);
    out.push(case(
        "rope_2d",
        |t, v| weighted(t, v[0].rope_2d((2, 2), 10_000.0)?, 17),
        &[randn(&[2, 4, 2, 8], 9)],
        h,
    )?);
    out.push(case(
        "cosine",
        |t, v| weighted(t, v[0].cosine_lastdim(v[1])?.0, 18),
        &[x.clone(), y.clone()],
        h,
    )?);
    out.push(case(
        "gather_rows",
        |t, v| weighted(t, v[0].gather_rows(&[1, 3, 1])?, 19),
        &[randn(&[4, 3], 10)],
        h,
    )?);
    out.push(case("sum_all", |_, v| Ok(v[0].sum_all()), std::slice::from_ref(&x), h)?);
    out.push(case("mean_all", |_, v| Ok(v[0].mean_all()), std::slice::from_ref(&x), h)?);
    let target = randn(&[2, 3, 4], 20);
    out.push(case("loss_diffusion", |_, v| loss_diffusion(v[0], &target), std::slice::from_ref(&x), h)?);
    let feats = randn(&[2, 3, 4], 21);
    out.push(case("loss_repa", |_, v| Ok(loss_repa(v[0], &feats)?.0), std::slice::from_ref(&x), h)?);
    Ok(out)
}

fn dit_case() -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = DitBlock::new(&mut store, "blk", 8, 4.0, &mut rng)?;
    let cfg = AttentionConfig::new(8, 2, true, (2, 2))?;
    randomize(&mut store, 0.4, 4);
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(randn(&[1, 4, 8], 5));
    inputs.push(randn(&[1, 1, 8], 6));
    case(
        "dit_block",
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            weighted(t, block.forward(&p, v[n], v[n + 1], &cfg)?, 7)
        },
        &inputs,
        1e-4,
    )
}

fn pit_case(variant: Variant) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let shape = PitShape {
        hidden: 8,
        pixel_hidden: 4,
        pixels: 4,
        ptc_rate: 1,
        mlp_ratio: 4.0,
        variant,
    };
    let block = PitBlock::new(&mut store, "pit", shape, &mut rng)?;
    randomize(&mut store, 0.4, 6);
    let attn = AttentionConfig::new(8, 2, true, (2, 2))?;
    let tokens = if variant == Variant::AGlobal { 1 } else { 4 };
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.push(randn(&[1, 4, 4, 4], 7));
    inputs.push(randn(&[1, tokens, 8], 8));
    case(
        &format!("pit_block ({})", variant.name()),
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            weighted(t, block.forward(&p, v[n], v[n + 1], &attn)?, 9)
        },
        &inputs,
        1e-4,
    )
}

fn model_case(variant: Variant) -> Result<GradCase> {
    let cfg = ModelConfig {
        variant,
        pixel_depth: if variant == Variant::VanillaDit { 0 } else { 2 },
        ..ModelConfig::toy()
    };
    let mut model = PixelDit::new(cfg.clone(), 0)?;
    open_gates(&mut model.params, 0.5, 1);
    let n = model.params.len();
    let mut inputs = model.params.tensors().to_vec();
    inputs.push(randn(&[1, cfg.channels, cfg.height(), cfg.width()], 2));
    case(
        &format!("end_to_end ({})", variant.name()),
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let out = model.forward(t, &p, v[n], &[0.37], &[1])?;
            weighted(t, out.velocity, 3)
        },
        &inputs,
        1e-3,
    )
}

/// Every check in a fixed order: primitives, the DiT block, PiT blocks of
/// each pixel variant, then the full toy model (p=2, D=16, D_pix=4, N=2,
/// M=2, 8×8) with the default pixel-wise variant.
pub fn grad_check_suite() -> Result<Vec<GradCase>> {
    let mut out = primitive_cases()?;
    out.push(dit_case()?);
    for v in [Variant::AGlobal, Variant::BPatchwise, Variant::CPixelwise, Variant::NoPixelAttention] {
        out.push(pit_case(v)?);
    }
    out.push(model_case(Variant::CPixelwise)?);
    Ok(out)
}
