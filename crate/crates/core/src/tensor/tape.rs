use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Broadcast, MatmulPlan};
use super::{check_perm, inverse_perm, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    MatMul(usize, usize, MatmulPlan),
    Silu(usize),
    GeluTanh(usize),
    Exp(usize),
    Softmax(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    Rope {
        x: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        grid: (usize, usize),
        base: f64,
    },
    NarrowLast {
        x: usize,
        start: usize,
    },
    Cosine {
        a: usize,
        b: usize,
        norms: Vec<(f64, f64)>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Silu(_) => "silu",
            Op::GeluTanh(_) => "gelu_tanh",
            Op::Exp(_) => "exp",
            Op::Softmax(_) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Rope { .. } => "rope_2d",
            Op::NarrowLast { .. } => "narrow",
            Op::Cosine { .. } => "cosine",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Records are appended as operations run, so inputs always precede the
/// records that consume them. [`Tape::backward`] walks the records once in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Forward matmul FLOPs recorded so far (multiply-add = 2).
    matmul_flops: std::cell::Cell<u64>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_list()
            .entries(nodes.iter().map(|n| (n.op.name(), n.value.shape().to_vec())))
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// FLOPs spent in forward matrix products on this tape, counting a
    /// multiply-add as two.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        value.requires_grad = needs_grad;
        value.grad = None;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            let needs = |i: usize| nodes[i].needs_grad;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b, bc) => {
                    if needs(*b) {
                        acc(*b, bc.reduce(&g, val(*b).numel()));
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b, bc) => {
                    if needs(*b) {
                        let mut gb = bc.reduce(&g, val(*b).numel());
                        gb.iter_mut().for_each(|v| *v = -*v);
                        acc(*b, gb);
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b, bc) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        bc.reduce_into(&g, &mut gb, |gi, i| gi * av.data[i]);
                        acc(*b, gb);
                    }
                    if needs(*a) {
                        acc(*a, bc.zip_with(&g, &bv.data, |gi, bi| gi * bi));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
                Op::MatMul(a, b, plan) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let mut ga = vec![0.0; av.numel()];
                        plan.grad_a(&g, &bv.data, &mut ga);
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        plan.grad_b(&av.data, &g, &mut gb);
                        acc(*b, gb);
                    }
                }
                Op::Silu(a) => {
                    let x = &val(*a).data;
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gi, &xi)| {
                                let s = sigmoid(xi);
                                gi * s * (1.0 + xi * (1.0 - s))
                            })
                            .collect(),
                    );
                }
                Op::GeluTanh(a) => {
                    let x = &val(*a).data;
                    acc(
                        *a,
                        g.iter().zip(x).map(|(gi, &xi)| gi * gelu_tanh_grad(xi)).collect(),
                    );
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    acc(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
                }
                Op::Softmax(a) => {
                    let y = &node.value.data;
                    let w = *node.value.shape.last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    acc(*a, gx);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = &val(*x).data;
                    let gv = &val(*gain).data;
                    let d = gv.len();
                    let mut gx = vec![0.0; xv.len()];
                    let mut ggain = vec![0.0; d];
                    for (r, ((xr, gr), out)) in
                        xv.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let inv = inv_rms[r];
                        let mut dot = 0.0;
                        for j in 0..d {
                            let xh = xr[j] * inv;
                            ggain[j] += gr[j] * xh;
                            dot += gr[j] * gv[j] * xh;
                        }
                        let mean_dot = dot / d as f64;
                        for j in 0..d {
                            let xh = xr[j] * inv;
                            out[j] = inv * (gr[j] * gv[j] - xh * mean_dot);
                        }
                    }
                    acc(*gain, ggain);
                    acc(*x, gx);
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Permute(a, perm) => {
                    let (_, back) =
                        kernels::permute(node.value.shape(), &g, &inverse_perm(perm));
                    acc(*a, back);
                }
                Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).numel()]),
                Op::MeanAll(a) => {
                    let n = val(*a).numel();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::Rope {
                    x,
                    tokens,
                    heads,
                    head_dim,
                    grid,
                    base,
                } => {
                    let mut gx = g;
                    kernels::rope_apply(&mut gx, *tokens, *heads, *head_dim, *grid, *base, -1.0);
                    acc(*x, gx);
                }
                Op::NarrowLast { x, start } => {
                    let xs = val(*x);
                    let w = *xs.shape.last().unwrap();
                    let len = *node.value.shape.last().unwrap();
                    let mut gx = vec![0.0; xs.numel()];
                    for (src, dst) in g.chunks(len).zip(gx.chunks_mut(w)) {
                        dst[*start..start + len].copy_from_slice(src);
                    }
                    acc(*x, gx);
                }
                Op::Cosine { a, b, norms } => {
                    let (av, bv) = (val(*a), val(*b));
                    let f = *av.shape.last().unwrap();
                    let mut ga = vec![0.0; av.numel()];
                    let mut gb = vec![0.0; bv.numel()];
                    for (r, &(na, nb)) in norms.iter().enumerate() {
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let ar = &av.data[r * f..(r + 1) * f];
                        let br = &bv.data[r * f..(r + 1) * f];
                        let s = node.value.data[r];
                        let gr = g[r];
                        for j in 0..f {
                            ga[r * f + j] = gr * (br[j] / (na * nb) - s * ar[j] / (na * na));
                            gb[r * f + j] = gr * (ar[j] / (na * nb) - s * br[j] / (nb * nb));
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::GatherRows { table, ids } => {
                    let tv = val(*table);
                    let w = tv.shape[1];
                    let mut gt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            gt[id * w + j] += g[r * w + j];
                        }
                    }
                    acc(*table, gt);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when the loss does not depend on `v`.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `tanh` through a single `exp`; several times cheaper than libm's and
/// within a few ulps in absolute terms.
fn tanh_fast(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub(crate) fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_fast(GELU_K * (x + GELU_C * x * x * x)))
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = tanh_fast(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, t: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id);
        self.tape.push(t, op, needs)
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let plan = Broadcast::plan(a.shape(), b.shape(), name)?;
        let data = plan.zip_with(&a.data, &b.data, f);
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape.clone(), data),
            mk(self.id, rhs.id, plan),
            needs,
        ))
    }

    /// `self + rhs`, with `rhs` broadcast onto `self`.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let t = self.value().map(|v| v * s);
        self.unary(t, Op::Scale(self.id, s))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let data = plan.forward(&a.data, &b.data);
        let cost = 2 * (data.len() * plan.k) as u64;
        self.tape.matmul_flops.set(self.tape.matmul_flops.get() + cost);
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        Ok(self.tape.push(
            Tensor::from_parts(plan.out_shape.clone(), data),
            Op::MatMul(self.id, rhs.id, plan),
            needs,
        ))
    }

    /// `self · weight + bias` over the last axis.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn silu(self) -> Var<'t> {
        let t = self.value().map(silu);
        self.unary(t, Op::Silu(self.id))
    }

    pub fn gelu_tanh(self) -> Var<'t> {
        let t = self.value().map(gelu_tanh);
        self.unary(t, Op::GeluTanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let t = self.value().map(f64::exp);
        self.unary(t, Op::Exp(self.id))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'t> {
        let v = self.value();
        let w = *v.shape.last().unwrap_or(&1);
        let t = Tensor::from_parts(v.shape.clone(), kernels::softmax_rows(&v.data, w));
        self.unary(t, Op::Softmax(self.id))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(self, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, g) = (self.value(), gain.value());
        let d = *x.shape.last().unwrap_or(&1);
        if g.shape() != [d] {
            return Err(Error::dim("rms_norm", x.shape(), g.shape()));
        }
        let mut inv_rms = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data.chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(&g.data).map(|(v, gi)| gi * v * inv));
        }
        let needs = self.tape.needs(self.id) || self.tape.needs(gain.id);
        Ok(self.tape.push(
            Tensor::from_parts(x.shape.clone(), out),
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            needs,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_perm(perm, v.ndim())?;
        let (shape, data) = kernels::permute(&v.shape, &v.data, perm);
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::Permute(self.id, perm.to_vec()),
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let s = self.value().mean();
        self.unary(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Axial rotary embedding over `[.., T, heads, head_dim]` with `T = rows·cols`.
    pub fn rope_2d(self, grid: (usize, usize), base: f64) -> Result<Var<'t>> {
        let v = self.value();
        let r = v.ndim();
        if r < 3 {
            return Err(Error::Shape(format!("rope_2d needs [.., T, H, hd], got {:?}", v.shape)));
        }
        let (tokens, heads, head_dim) = (v.shape[r - 3], v.shape[r - 2], v.shape[r - 1]);
        if tokens != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "rope_2d: {tokens} tokens for a {}x{} grid",
                grid.0, grid.1
            )));
        }
        if head_dim % 4 != 0 {
            return Err(Error::Shape(format!(
                "rope_2d: head_dim {head_dim} not divisible by 4"
            )));
        }
        let mut data = v.data.clone();
        kernels::rope_apply(&mut data, tokens, heads, head_dim, grid, base, 1.0);
        Ok(self.unary(
            Tensor::from_parts(v.shape.clone(), data),
            Op::Rope {
                x: self.id,
                tokens,
                heads,
                head_dim,
                grid,
                base,
            },
        ))
    }

    /// Slice `start..start+len` of the last axis.
    pub fn narrow_lastdim(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let w = *v.shape.last().unwrap_or(&1);
        if len == 0 || start + len > w || v.ndim() == 0 {
            return Err(Error::Shape(format!(
                "narrow {start}..{} of last axis in {:?}",
                start + len,
                v.shape
            )));
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(v.numel() / w * len);
        for row in v.data.chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.unary(
            Tensor::from_parts(shape, data),
            Op::NarrowLast { x: self.id, start },
        ))
    }

    /// Row-wise cosine similarity over the last axis; rows where either side has
    /// zero norm yield 0. Returns the similarities and the number of such rows.
    pub fn cosine_lastdim(self, rhs: Var<'t>) -> Result<(Var<'t>, usize)> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() || a.ndim() == 0 {
            return Err(Error::dim("cosine", a.shape(), b.shape()));
        }
        let f = *a.shape.last().unwrap();
        let mut norms = Vec::with_capacity(a.numel() / f);
        let mut sims = Vec::with_capacity(a.numel() / f);
        let mut degenerate = 0;
        for (ar, br) in a.data.chunks(f).zip(b.data.chunks(f)) {
            let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push((na, nb));
            if na == 0.0 || nb == 0.0 {
                degenerate += 1;
                sims.push(0.0);
            } else {
                let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                sims.push(dot / (na * nb));
            }
        }
        let shape = a.shape[..a.ndim() - 1].to_vec();
        let needs = self.tape.needs(self.id) || self.tape.needs(rhs.id);
        let out = self.tape.push(
            Tensor::from_parts(shape, sims),
            Op::Cosine {
                a: self.id,
                b: rhs.id,
                norms,
            },
            needs,
        );
        Ok((out, degenerate))
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows on shape {:?}", t.shape)));
        }
        let (v, w) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row {id} out of range for table of {v} rows")));
            }
            data.extend_from_slice(&t.data[id * w..(id + 1) * w]);
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        Ok(self.unary(
            Tensor::from_parts(vec![ids.len(), w], data),
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }
}
