//! Raw numeric kernels over flat row-major buffers.

use crate::error::{Error, Result};

use super::numel_of;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    // Innermost axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// How a right operand maps onto the left operand's flat index space.
#[derive(Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand equals a trailing block of the left shape; index = i % period.
    Repeat(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(out: &[usize], rhs: &[usize], op: &'static str) -> Result<Broadcast> {
        if out == rhs {
            return Ok(Broadcast::Same);
        }
        if rhs.len() > out.len() {
            return Err(Error::dim(op, out, rhs));
        }
        let off = out.len() - rhs.len();
        for (i, &e) in rhs.iter().enumerate() {
            if e != 1 && e != out[off + i] {
                return Err(Error::dim(op, out, rhs));
            }
        }
        // Strip leading ones of rhs for the suffix test.
        let first_non_one = rhs.iter().position(|&e| e != 1).unwrap_or(rhs.len());
        let core = &rhs[first_non_one..];
        if core == &out[out.len() - core.len()..] {
            return Ok(Broadcast::Repeat(numel_of(core)));
        }
        let mut rstr = vec![0usize; out.len()];
        let rs = strides(rhs);
        for (i, &e) in rhs.iter().enumerate() {
            if e != 1 {
                rstr[off + i] = rs[i];
            }
        }
        let n = numel_of(out);
        let mut map = Vec::with_capacity(n);
        let rank = out.len();
        let mut idx = vec![0usize; rank];
        let mut cur = 0usize;
        for _ in 0..n {
            map.push(cur);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                cur += rstr[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                cur -= rstr[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    #[cfg(test)]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Repeat(p) => i % p,
            Broadcast::Map(m) => m[i],
        }
    }

    pub(crate) fn zip_with(&self, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Repeat(p) => {
                let mut out = Vec::with_capacity(a.len());
                for chunk in a.chunks(*p) {
                    out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::Map(m) => a.iter().zip(m).map(|(&x, &j)| f(x, b[j])).collect(),
        }
    }

    /// Sum `g` (left-shaped) into a right-shaped buffer of length `rhs_len`.
    pub(crate) fn reduce(&self, g: &[f64], rhs_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; rhs_len];
        self.reduce_into(g, &mut out, |v, _| v);
        out
    }

    /// Accumulate `f(g[i], i)` into `out[index(i)]`.
    pub(crate) fn reduce_into(&self, g: &[f64], out: &mut [f64], f: impl Fn(f64, usize) -> f64) {
        match self {
            Broadcast::Same => {
                for (i, (o, &v)) in out.iter_mut().zip(g).enumerate() {
                    *o += f(v, i);
                }
            }
            Broadcast::Repeat(p) => {
                for (c, chunk) in g.chunks(*p).enumerate() {
                    for (j, &v) in chunk.iter().enumerate() {
                        out[j] += f(v, c * p + j);
                    }
                }
            }
            Broadcast::Map(m) => {
                for (i, (&v, &j)) in g.iter().zip(m).enumerate() {
                    out[j] += f(v, i);
                }
            }
        }
    }
}

/// `c = beta * c + a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// of the stored operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds were checked above; strides describe the stored layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a batched matmul with broadcast batch axes.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `(a_batch, b_batch)` for each output batch entry; empty when `b` is unbatched.
    pub pairs: Vec<(usize, usize)>,
    /// `b` carries no batch axes: `a` can be flattened to one big GEMM.
    pub flat: bool,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        if numel_of(bb) == 1 && bb.len() <= ab.len() {
            let mut out_shape = ab.to_vec();
            out_shape.extend([m, n]);
            return Ok(Self { out_shape, m, k, n, pairs: vec![], flat: true });
        }
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for i in 0..rank {
            let e = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::dim("matmul", a, b)),
            };
            batch.push(e);
        }
        let sa = strides(&pa);
        let sb = strides(&pb);
        let total = numel_of(&batch);
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut ia = 0;
            let mut ib = 0;
            for ax in 0..rank {
                if pa[ax] != 1 {
                    ia += idx[ax] * sa[ax];
                }
                if pb[ax] != 1 {
                    ib += idx[ax] * sb[ax];
                }
            }
            pairs.push((ia, ib));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self { out_shape, m, k, n, pairs, flat: false })
    }

    pub(crate) fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; numel_of(&self.out_shape)];
        if self.flat {
            let rows = a.len() / k;
            gemm(rows, k, n, a, false, b, false, 0.0, &mut out);
        } else {
            for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &a[ia * m * k..],
                    false,
                    &b[ib * k * n..],
                    false,
                    0.0,
                    &mut out[o * m * n..(o + 1) * m * n],
                );
            }
        }
        out
    }

    /// Accumulate `dA += dC · Bᵀ`.
    pub(crate) fn grad_a(&self, dc: &[f64], b: &[f64], da: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            let rows = da.len() / k;
            gemm(rows, n, k, dc, false, b, true, 1.0, da);
        } else {
            for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
                gemm(
                    m,
                    n,
                    k,
                    &dc[o * m * n..],
                    false,
                    &b[ib * k * n..],
                    true,
                    1.0,
                    &mut da[ia * m * k..(ia + 1) * m * k],
                );
            }
        }
    }

    /// Accumulate `dB += Aᵀ · dC`.
    pub(crate) fn grad_b(&self, a: &[f64], dc: &[f64], db: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.flat {
            let rows = a.len() / k;
            gemm(k, rows, n, a, true, dc, false, 1.0, db);
        } else {
            for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
                gemm(
                    k,
                    m,
                    n,
                    &a[ia * m * k..],
                    true,
                    &dc[o * m * n..],
                    false,
                    1.0,
                    &mut db[ib * k * n..(ib + 1) * k * n],
                );
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - mx).exp();
            s += *oi;
        }
        let inv = 1.0 / s;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Angles used by the axial rotary embedding for one token.
///
/// The head dimension is split into `head_dim / 2` rotation pairs `(2j, 2j+1)`;
/// the first half of the pairs rotate by the row index, the second half by
/// the column index, each with frequencies `base^(-i / (head_dim / 4))`.
pub(crate) fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    let quarter = head_dim / 4;
    (0..quarter)
        .map(|i| base.powf(-(i as f64) / quarter as f64))
        .collect()
}

/// Rotate `x: [.., T, H, hd]` in place; `sign = -1` applies the inverse.
pub(crate) fn rope_apply(
    x: &mut [f64],
    tokens: usize,
    heads: usize,
    head_dim: usize,
    grid: (usize, usize),
    base: f64,
    sign: f64,
) {
    let freqs = rope_frequencies(head_dim, base);
    let quarter = head_dim / 4;
    let cols = grid.1;
    // cos/sin table per token: [T, hd/2]
    let half = head_dim / 2;
    let mut cs = vec![(0.0, 0.0); tokens * half];
    for t in 0..tokens {
        let (r, c) = ((t / cols) as f64, (t % cols) as f64);
        for j in 0..half {
            let ang = if j < quarter { r * freqs[j] } else { c * freqs[j - quarter] };
            cs[t * half + j] = (ang.cos(), sign * ang.sin());
        }
    }
    let per_token = heads * head_dim;
    for (chunk_idx, tok) in x.chunks_mut(per_token).enumerate() {
        let t = chunk_idx % tokens;
        for h in 0..heads {
            let v = &mut tok[h * head_dim..(h + 1) * head_dim];
            for j in 0..half {
                let (c, s) = cs[t * half + j];
                let (a, b) = (v[2 * j], v[2 * j + 1]);
                v[2 * j] = a * c - b * s;
                v[2 * j + 1] = a * s + b * c;
            }
        }
    }
}
