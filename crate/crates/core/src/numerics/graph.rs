//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! only keep what their backward rule needs; gradients flow exclusively into
//! nodes that require them, so frozen weights never get a weight-gradient
//! GEMM.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    Gather { table: Var, ids: Vec<usize> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of one forward pass over a [`ParamStore`].
pub struct Graph<'s, F: Real = f32> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    no_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F: Real> {
    nodes: Vec<Option<Tensor<F>>>,
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<F>> {
        self.params
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed under `out` (0 on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` once per row (last axis) of
/// `out`; within a row the operands advance by their last-axis strides.
fn bcast_rows(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        f(o * inner, oa, ob);
        // advance odometer over the outer axes
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Row of `x` starting at `off` with last-axis stride `step` (0 or 1).
enum Lane<'a, F> {
    Slice(&'a [F]),
    Splat(F),
}

impl<'a, F: Real> Lane<'a, F> {
    #[inline]
    fn of(x: &'a [F], off: usize, step: usize, len: usize) -> Self {
        if step == 0 {
            Lane::Splat(x[off])
        } else {
            Lane::Slice(&x[off..off + len])
        }
    }
}

/// `dst[j] = f(a[j], b[j])` over broadcast lanes.
#[inline]
fn lane_map<F: Real>(dst: &mut [F], a: Lane<'_, F>, b: Lane<'_, F>, f: impl Fn(F, F) -> F) {
    match (a, b) {
        (Lane::Slice(a), Lane::Slice(b)) => {
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = f(x, y);
            }
        }
        (Lane::Slice(a), Lane::Splat(y)) => {
            for (d, &x) in dst.iter_mut().zip(a) {
                *d = f(x, y);
            }
        }
        (Lane::Splat(x), Lane::Slice(b)) => {
            for (d, &y) in dst.iter_mut().zip(b) {
                *d = f(x, y);
            }
        }
        (Lane::Splat(x), Lane::Splat(y)) => dst.fill(f(x, y)),
    }
}

/// `acc[off + j*step] += g[j] * w[j]` (or `g[j]` when `w` is `None`).
#[inline]
fn lane_accumulate<F: Real>(acc: &mut [F], off: usize, step: usize, g: &[F], w: Option<Lane<'_, F>>) {
    let n = g.len();
    if step == 0 {
        let s: F = match w {
            None => g.iter().copied().sum(),
            Some(Lane::Slice(w)) => g.iter().zip(w).map(|(&a, &b)| a * b).sum(),
            Some(Lane::Splat(c)) => g.iter().copied().sum::<F>() * c,
        };
        acc[off] = acc[off] + s;
        return;
    }
    let dst = &mut acc[off..off + n];
    match w {
        None => {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d = *d + x;
            }
        }
        Some(Lane::Slice(w)) => {
            for ((d, &x), &y) in dst.iter_mut().zip(g).zip(w) {
                *d = *d + x * y;
            }
        }
        Some(Lane::Splat(c)) => {
            for (d, &x) in dst.iter_mut().zip(g) {
                *d = *d + x * c;
            }
        }
    }
}

fn permute_data<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return x.clone();
    }
    let inner = out_shape[rank - 1];
    let is = st[rank - 1];
    let outer = numel(&out_shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if is == 1 {
            out.extend_from_slice(&src[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| src[off + j * is]));
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves size")
}

/// Row/column strides of a stored matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
struct View {
    rs: isize,
    cs: isize,
}

impl View {
    fn of(rows: usize, cols: usize, transposed: bool) -> Self {
        // `rows x cols` is the logical (possibly transposed) shape.
        if transposed {
            View {
                rs: 1,
                cs: rows as isize,
            }
        } else {
            View {
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (+)= a @ b` over raw views.
#[allow(clippy::too_many_arguments)]
fn gemm_into<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    va: View,
    b: &[F],
    vb: View,
    c: &mut [F],
    vc: View,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: callers size `a`, `b`, `c` as `m*k`, `k*n`, `m*n` with the
    // given views, and `c` is a distinct buffer.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            va.rs,
            va.cs,
            b.as_ptr(),
            vb.rs,
            vb.cs,
            beta,
            c.as_mut_ptr(),
            vc.rs,
            vc.cs,
        )
    }
}

/// `tanh` through a single `exp`; far cheaper than libm's `tanhf`.
#[inline]
fn tanh_exp<F: Real>(u: F) -> F {
    let two = F::one() + F::one();
    F::one() - two / ((two * u).exp() + F::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            no_grad: false,
        }
    }

    /// A graph in which nothing requires gradients.
    pub fn no_grad(store: &'s ParamStore<F>) -> Self {
        Self {
            no_grad: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameter leaf; repeated lookups of one name share a node so that
    /// gradients of reused weights accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(sa, data)?, rg));
        }
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
        let (ta, tb) = (bcast_strides(&sa, &out), bcast_strides(&sb, &out));
        let mut data = vec![F::zero(); numel(&out)];
        let inner = out.last().copied().unwrap_or(1);
        let (ia, ib) = (ta.last().copied().unwrap_or(0), tb.last().copied().unwrap_or(0));
        bcast_rows(&out, &ta, &tb, |o, i, j| {
            lane_map(
                &mut data[o..o + inner],
                Lane::of(xa, i, ia, inner),
                Lane::of(xb, j, ib, inner),
                &f,
            )
        });
        Ok((Tensor::new(out, data)?, rg))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Broadcasting subtraction.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Broadcasting multiplication.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::lit(c);
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = F::lit(c);
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `[.., K] @ [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![F::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            View::of(m, k, false),
            self.value(b).data(),
            View::of(k, n, false),
            &mut c,
            View::of(m, n, false),
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, c)?, Op::MatMul(a, b), rg))
    }

    /// Batched matrix product over `[G, ., .]` operands, optionally
    /// transposing either operand's trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let g = sa[0];
        let mut c = vec![F::zero(); g * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm_into(
                m,
                k,
                n,
                &xa[i * m * k..(i + 1) * m * k],
                View::of(m, k, ta),
                &xb[i * k * n..(i + 1) * k * n],
                View::of(k, n, tb),
                &mut c[i * m * n..(i + 1) * m * n],
                View::of(m, n, false),
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![g, m, n], c)?, Op::Bmm { a, b, ta, tb }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Axis permutation; `perm[i]` names the input axis that becomes axis `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", self.shape(a), perm));
        }
        let t = permute_data(self.value(a), perm);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(shape_err("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x.shape().last().ok_or_else(|| shape_err("softmax", x.shape(), &[]))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            let inv = F::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (F::lit(GELU_C), F::lit(GELU_A));
        let half = F::lit(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (F::one() + tanh_exp(c * (x + k * x * x * x))));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    /// Normalization over the last axis, without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", x.shape(), &[]))?;
        let eps = F::lit(eps);
        let inv_n = F::lit(1.0 / n as f64);
        let mut out = x.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let r = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LayerNorm { x: a, rstd }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| crate::error::invalid("concat of nothing"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x: a, axis, start }, rg))
    }

    /// Splits `axis` into chunks of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        if start != self.shape(a).get(axis).copied().unwrap_or(0) {
            return Err(shape_err("split", self.shape(a), sizes));
        }
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<F>() / F::lit(x.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Rows of a `[V, D]` table selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(shape_err("gather", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather", s, &[bad]));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error between `a` and `b` (same shape).
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        let mut params = BTreeMap::new();
        for (name, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (shaped like the broadcast output) down to `target`'s shape.
    fn reduce_to(&self, g: &Tensor<F>, target: Var) -> Tensor<F> {
        self.reduce_product(g, target, None)
    }

    /// Sums `g * other` (both shaped like the broadcast output) down to
    /// `target`'s shape.
    fn reduce_product(&self, g: &Tensor<F>, target: Var, other: Option<&Tensor<F>>) -> Tensor<F> {
        let ts = self.shape(target);
        let out = g.shape();
        let st = bcast_strides(ts, out);
        let so = match other {
            Some(o) => bcast_strides(o.shape(), out),
            None => vec![0; out.len()],
        };
        let inner = out.last().copied().unwrap_or(1);
        let (it, io) = (st.last().copied().unwrap_or(0), so.last().copied().unwrap_or(0));
        let mut acc = vec![F::zero(); numel(ts)];
        let gd = g.data();
        bcast_rows(out, &st, &so, |o, t, j| {
            let w = other.map(|x| Lane::of(x.data(), j, io, inner));
            lane_accumulate(&mut acc, t, it, &gd[o..o + inner], w);
        });
        Tensor::new(ts.to_vec(), acc).expect("reduction shape")
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.rg(*a) {
                    let ga = if self.shape(*a) == g.shape() {
                        g.clone()
                    } else {
                        self.reduce_to(g, *a)
                    };
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = if self.shape(*b) == g.shape() {
                        g.clone()
                    } else {
                        self.reduce_to(g, *b)
                    };
                    if neg {
                        gb = gb.map(|v| -v);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let out = g.shape().to_vec();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let ga = if self.shape(this) == out.as_slice() && ov.shape() == out.as_slice() {
                        let data = g.data().iter().zip(ov.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(out.clone(), data)?
                    } else {
                        self.reduce_product(g, this, Some(ov))
                    };
                    self.acc(grads, this, ga);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|v| v * *c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (k, n) = (sb[0], sb[1]);
                let m = numel(sa) / k;
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_into(
                        m,
                        n,
                        k,
                        g.data(),
                        View::of(m, n, false),
                        self.value(*b).data(),
                        View::of(k, n, false).t(),
                        &mut da,
                        View::of(m, k, false),
                        false,
                    );
                    self.acc(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_into(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        View::of(m, k, false).t(),
                        g.data(),
                        View::of(m, n, false),
                        &mut db,
                        View::of(k, n, false),
                        false,
                    );
                    self.acc(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (va, vb, vc) = (View::of(m, k, *ta), View::of(k, n, *tb), View::of(m, n, false));
                let gd = g.data();
                if self.rg(*a) {
                    // dA' = dC B'^T, written through A's view
                    let xb = self.value(*b).data();
                    let mut da = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm_into(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            vc,
                            &xb[i * k * n..(i + 1) * k * n],
                            vb.t(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            va,
                            false,
                        );
                    }
                    self.acc(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.rg(*b) {
                    // dB' = A'^T dC, written through B's view
                    let xa = self.value(*a).data();
                    let mut db = vec![F::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm_into(
                            k,
                            m,
                            n,
                            &xa[i * m * k..(i + 1) * m * k],
                            va.t(),
                            &gd[i * m * n..(i + 1) * m * n],
                            vc,
                            &mut db[i * k * n..(i + 1) * k * n],
                            vb,
                            false,
                        );
                    }
                    self.acc(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a))?;
                self.acc(grads, *a, ga);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *a, permute_data(g, &inv));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut out = vec![F::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Gelu(a) => {
                let (c, k) = (F::lit(GELU_C), F::lit(GELU_A));
                let half = F::lit(0.5);
                let three = F::lit(3.0);
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let th = tanh_exp(c * (x + k * x * x * x));
                        let d = half * (F::one() + th)
                            + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x);
                        gv * d
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = F::one() / (F::one() + (-x).exp());
                        gv * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                self.acc(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let inv_n = F::lit(1.0 / n as f64);
                let mut out = vec![F::zero(); y.len()];
                for (((o, yr), gr), &r) in out
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                    .zip(rstd)
                {
                    let mg = gr.iter().copied().sum::<F>() * inv_n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = r * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Concat { parts, axis } => {
                let s = g.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(numel(&ps));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::new(ps, data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = g.shape()[*axis];
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let mut data = vec![F::zero(); numel(&xs)];
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, Tensor::new(xs, data)?);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MeanAll(a) => {
                let gv = g.data()[0] / F::lit(self.value(*a).len() as f64);
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Gather { table, ids } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut data = vec![F::zero(); numel(&s)];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] = data[i * d + j] + g.data()[r * d + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(s, data)?);
            }
        }
        Ok(())
    }
}

/// Evaluates `loss_fn` on a fresh graph and returns the loss with gradients
/// of every trainable parameter that received one.
pub fn forward_backward<F, L>(store: &ParamStore<F>, loss_fn: L) -> Result<(F, BTreeMap<String, Tensor<F>>)>
where
    F: Real,
    L: FnOnce(&mut Graph<'_, F>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.into_params()))
}

/// Central finite difference of `loss_fn` with respect to every element of
/// parameter `name`.
pub fn finite_difference_grad<F, L>(store: &ParamStore<F>, loss_fn: L, name: &str, eps: f64) -> Result<Tensor<F>>
where
    F: Real,
    L: Fn(&ParamStore<F>) -> Result<F>,
{
    if eps <= 0.0 {
        return Err(crate::error::invalid("finite-difference step must be positive"));
    }
    let mut work = store.clone();
    let n = work.tensor(name)?.len();
    let shape = work.tensor(name)?.shape().to_vec();
    let h = F::lit(eps);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = work.tensor(name)?.data()[i];
        work.tensor_mut(name)?.data_mut()[i] = orig + h;
        let up = loss_fn(&work)?;
        work.tensor_mut(name)?.data_mut()[i] = orig - h;
        let down = loss_fn(&work)?;
        work.tensor_mut(name)?.data_mut()[i] = orig;
        out.push((up - down) / (h + h));
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
        let (loss, grads) = forward_backward(&s, |g| {
            let w = g.param("w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads["w"].data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.insert(
            "x",
            Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 0.5, 0.5, 1.0]).unwrap(),
            true,
        )
        .unwrap();
        let (_, grads) = forward_backward(&s, |g| {
            let x = g.param("x")?;
            let p = g.softmax(x)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(grads["x"].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_and_untouched_params_have_no_gradient() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(&[2], 1.0), true).unwrap();
        s.insert("b", Tensor::full(&[2], 2.0), false).unwrap();
        s.insert("c", Tensor::full(&[2], 2.0), true).unwrap();
        let (_, grads) = forward_backward(&s, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            let y = g.mul(a, b)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        assert!(matches!(g.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn finite_difference_examples() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap(), true).unwrap();
        let fd = finite_difference_grad(&s, |p| Ok(p.tensor("w")?.data()[0].powi(2)), "w", 1e-3).unwrap();
        assert!((fd.data()[0] - 4.0).abs() < 1e-6);
        s.tensor_mut("w").unwrap().data_mut()[0] = 0.0;
        let fd = finite_difference_grad(&s, |p| Ok(p.tensor("w")?.data()[0].sin()), "w", 1e-3).unwrap();
        assert!((fd.data()[0] - 1.0).abs() < 1e-6);
        assert!(finite_difference_grad(&s, |_| Ok(0.0), "w", 0.0).is_err());
    }

    #[test]
    fn broadcast_helpers() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 5, 1]), Some(vec![2, 5, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(bcast_strides(&[3, 1], &[2, 3, 4]), vec![0, 1, 0]);
    }
}
