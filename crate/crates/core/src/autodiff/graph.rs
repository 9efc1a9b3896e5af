//! Tape-based reverse-mode autodiff.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]; node ids are
//! therefore already in topological order and [`Graph::backward`] simply walks
//! them in reverse. A graph can be differentiated once.

use std::cell::{Cell, RefCell};

use super::tensor::{split_axis, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: E },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    Max { a: usize, argmax: Vec<usize> },
    Sum { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    Delay { a: usize, steps: usize },
    LayerNorm { a: usize, inv_std: Vec<E> },
    CrossEntropy { a: usize, class: usize, probs: Vec<E> },
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recording of one forward pass. Single-threaded and single-use.
#[derive(Debug)]
pub struct Graph<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, E: Element = f32> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<E: Element> {
    by_node: Vec<Option<Tensor<E>>>,
    visited: usize,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. a leaf. `None` for leaves without `requires_grad`
    /// and for leaves the loss does not depend on.
    pub fn wrt(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<E>) -> Var<'_, E> {
        let requires_grad = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, requires_grad)
    }

    /// Leaf that always tracks gradients.
    pub fn param(&self, tensor: Tensor<E>) -> Var<'_, E> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&self, tensor: Tensor<E>) -> Var<'_, E> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push_unchecked(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &str, value: Tensor<E>, op: Op<E>, parents: &[usize]) -> Result<Var<'_, E>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::shape("backward", "loss belongs to another graph"));
        }
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }

        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<E>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![E::one()]);
        let mut visited = 0;

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            visited += 1;
            backward_node(&nodes, id, upstream, &mut grads, &mut leaves)?;
        }

        Ok(Gradients {
            by_node: leaves,
            visited,
        })
    }
}

fn backward_node<E: Element>(
    nodes: &[Node<E>],
    id: usize,
    upstream: Vec<E>,
    grads: &mut [Option<Vec<E>>],
    leaves: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    // accumulate into a parent's gradient buffer, skipping parents that don't need one
    let mut acc = |parent: usize, f: &mut dyn FnMut(&mut [E])| {
        if !nodes[parent].requires_grad {
            return;
        }
        let buf = grads[parent].get_or_insert_with(|| vec![E::zero(); nodes[parent].value.numel()]);
        f(buf);
    };
    let dy = &upstream;

    match &node.op {
        Op::Leaf => {
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "backward".into(),
                });
            }
            leaves[id] = Some(Tensor::new(out.shape().to_vec(), upstream)?);
        }
        Op::MatMul { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let mm = MatMulShape::infer_dims(av.shape(), bv.shape(), *trans_b)?;
            acc(*a, &mut |da| {
                for bi in 0..mm.batch {
                    let g = &dy[bi * mm.m * mm.n..][..mm.m * mm.n];
                    let bs = &bv.data()[mm.b_offset(bi)..][..mm.k * mm.n];
                    let da = &mut da[mm.a_offset(bi)..][..mm.m * mm.k];
                    if *trans_b {
                        gemm_nn(g, bs, da, mm.m, mm.n, mm.k);
                    } else {
                        gemm_nt(g, bs, da, mm.m, mm.n, mm.k);
                    }
                }
            });
            acc(*b, &mut |db| {
                for bi in 0..mm.batch {
                    let g = &dy[bi * mm.m * mm.n..][..mm.m * mm.n];
                    let as_ = &av.data()[mm.a_offset(bi)..][..mm.m * mm.k];
                    let db = &mut db[mm.b_offset(bi)..][..mm.k * mm.n];
                    if *trans_b {
                        gemm_tn(g, as_, db, mm.m, mm.n, mm.k);
                    } else {
                        gemm_tn(as_, g, db, mm.m, mm.k, mm.n);
                    }
                }
            });
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -E::one()
            } else {
                E::one()
            };
            acc(*a, &mut |da| add_into(da, dy));
            let nb = nodes[*b].value.numel();
            acc(*b, &mut |db| {
                for chunk in dy.chunks(nb) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += sign * *g;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let nb = bv.len();
            acc(*a, &mut |da| {
                for (ds, gs) in da.chunks_exact_mut(nb).zip(dy.chunks_exact(nb)) {
                    for ((d, &g), &b) in ds.iter_mut().zip(gs).zip(bv) {
                        *d += g * b;
                    }
                }
            });
            acc(*b, &mut |db| {
                for (gs, xs) in dy.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                    for ((d, &g), &x) in db.iter_mut().zip(gs).zip(xs) {
                        *d += g * x;
                    }
                }
            });
        }
        Op::Scale { a, factor } => {
            acc(*a, &mut |da| {
                for (d, g) in da.iter_mut().zip(dy) {
                    *d += *g * *factor;
                }
            });
        }
        Op::Relu { a } => {
            let x = nodes[*a].value.data();
            acc(*a, &mut |da| {
                for i in 0..da.len() {
                    if x[i] > E::zero() {
                        da[i] += dy[i];
                    }
                }
            });
        }
        Op::Tanh { a } => {
            let y = out.data();
            acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += dy[i] * (E::one() - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = out.data();
            acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += dy[i] * y[i] * (E::one() - y[i]);
                }
            });
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            acc(*a, &mut |da| {
                if inner == 1 {
                    for ((ys, gs), ds) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(da.chunks_exact_mut(n)) {
                        let dot = dot(ys, gs);
                        for ((d, &y), &g) in ds.iter_mut().zip(ys).zip(gs) {
                            *d += y * (g - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: E = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            da[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Mean { a, axis } => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let scale = E::one() / E::from_usize(n).unwrap();
            acc(*a, &mut |da| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            da[(o * n + j) * inner + i] += dy[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Max { a, argmax, .. } => {
            acc(*a, &mut |da| {
                for (g, &src) in dy.iter().zip(argmax) {
                    da[src] += *g;
                }
            });
        }
        Op::Sum { a } => {
            let g = dy[0];
            acc(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g;
                }
            });
        }
        Op::Reshape { a } => acc(*a, &mut |da| add_into(da, dy)),
        Op::Permute { a, perm } => {
            let src_shape = nodes[*a].value.shape();
            let map = permute_index_map(src_shape, perm);
            acc(*a, &mut |da| {
                for (o, &s) in map.iter().enumerate() {
                    da[s] += dy[o];
                }
            });
        }
        Op::Narrow { a, axis, start } => {
            let (outer, n_src, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let len = out.shape()[*axis];
            acc(*a, &mut |da| {
                for o in 0..outer {
                    let src = &mut da[(o * n_src + start) * inner..][..len * inner];
                    add_into(src, &dy[o * len * inner..][..len * inner]);
                }
            });
        }
        Op::Delay { a, steps } => {
            let t_len = out.shape()[0];
            let row = out.numel() / t_len;
            acc(*a, &mut |da| {
                for t in 0..t_len.saturating_sub(*steps) {
                    add_into(&mut da[t * row..][..row], &dy[(t + steps) * row..][..row]);
                }
            });
        }
        Op::LayerNorm { a, inv_std } => {
            let xhat = out.data();
            let n = *out.shape().last().unwrap();
            let nf = E::from_usize(n).unwrap();
            acc(*a, &mut |da| {
                for (r, inv) in inv_std.iter().enumerate() {
                    let g = &dy[r * n..][..n];
                    let xh = &xhat[r * n..][..n];
                    let sum_g: E = g.iter().copied().sum();
                    let sum_gx: E = g.iter().zip(xh).map(|(g, x)| *g * *x).sum();
                    for j in 0..n {
                        da[r * n + j] += *inv / nf * (nf * g[j] - sum_g - xh[j] * sum_gx);
                    }
                }
            });
        }
        Op::CrossEntropy { a, class, probs } => {
            let g = dy[0];
            acc(*a, &mut |da| {
                for (j, p) in probs.iter().enumerate() {
                    let target = if j == *class { E::one() } else { E::zero() };
                    da[j] += g * (*p - target);
                }
            });
        }
    }
    Ok(())
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// c[m,q] += a[m,p] · b[p,q]
fn gemm_nn<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, q: usize) {
    if q < NARROW && p >= NARROW {
        let bt = transpose(b, p, q);
        for i in 0..m {
            let a_row = &a[i * p..][..p];
            for j in 0..q {
                c[i * q + j] += dot(a_row, &bt[j * p..][..p]);
            }
        }
        return;
    }
    for i in 0..m {
        let c_row = &mut c[i * q..][..q];
        for (r, &a_ir) in a[i * p..][..p].iter().enumerate() {
            if a_ir == E::zero() {
                continue;
            }
            for (c, &b) in c_row.iter_mut().zip(&b[r * q..][..q]) {
                *c += a_ir * b;
            }
        }
    }
}

/// Output rows narrower than this are computed as dot products instead of row updates.
const NARROW: usize = 8;

/// `[rows, cols]` to `[cols, rows]`.
fn transpose<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for (c, &v) in x[r * cols..][..cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

/// c[m,q] += a[m,p] · b[q,p]ᵀ
fn gemm_nt<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, q: usize) {
    if m == 1 {
        for j in 0..q {
            c[j] += dot(a, &b[j * p..][..p]);
        }
        return;
    }
    // the row-update form of gemm_nn vectorizes; dot products over short rows do not
    if q < NARROW {
        for i in 0..m {
            let a_row = &a[i * p..][..p];
            for j in 0..q {
                c[i * q + j] += dot(a_row, &b[j * p..][..p]);
            }
        }
        return;
    }
    gemm_nn(a, &transpose(b, q, p), c, m, p, q);
}

fn dot<E: Element>(x: &[E], y: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let chunks = x.len() / 8 * 8;
    for (xs, ys) in x[..chunks].chunks_exact(8).zip(y[..chunks].chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += xs[l] * ys[l];
        }
    }
    let mut s = lanes.iter().copied().sum::<E>();
    for (a, b) in x[chunks..].iter().zip(&y[chunks..]) {
        s += *a * *b;
    }
    s
}

/// c[m,q] += a[r,m]ᵀ · b[r,q]
fn gemm_tn<E: Element>(a: &[E], b: &[E], c: &mut [E], r: usize, m: usize, q: usize) {
    if q < NARROW && r >= NARROW {
        let (at, bt) = (transpose(a, r, m), transpose(b, r, q));
        for i in 0..m {
            let a_col = &at[i * r..][..r];
            for j in 0..q {
                c[i * q + j] += dot(a_col, &bt[j * r..][..r]);
            }
        }
        return;
    }
    for row in 0..r {
        let b_row = &b[row * q..][..q];
        for (i, &a_ri) in a[row * m..][..m].iter().enumerate() {
            if a_ri == E::zero() {
                continue;
            }
            for (c, &b) in c[i * q..][..q].iter_mut().zip(b_row) {
                *c += a_ri * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MatMulShape {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatMulShape {
    fn infer(a: &[usize], b: &[usize], trans_b: bool) -> Result<(Self, Vec<usize>)> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {a:?} and {b:?}"),
            ));
        }
        let (a_batch, a_mat) = a.split_at(a.len() - 2);
        let (b_batch, b_mat) = b.split_at(b.len() - 2);
        let (m, k) = (a_mat[0], a_mat[1]);
        let (kb, n) = if trans_b {
            (b_mat[1], b_mat[0])
        } else {
            (b_mat[0], b_mat[1])
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {a:?} @ {b:?}{}", if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
            (_, true) => a_batch.to_vec(),
            (true, false) => b_batch.to_vec(),
            (false, false) if a_batch == b_batch => a_batch.to_vec(),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("batch dimensions {a_batch:?} and {b_batch:?} do not broadcast"),
                ))
            }
        };
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok((
            Self {
                batch: batch_shape.iter().product(),
                m,
                k,
                n,
                a_batched: !a_batch.is_empty(),
                b_batched: !b_batch.is_empty(),
            },
            out_shape,
        ))
    }

    fn infer_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        Self::infer(a, b, trans_b).map(|(s, _)| s)
    }

    fn a_offset(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_offset(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }
}


/// For each output element of a permutation, the flat source index.
fn permute_index_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = src_shape.len();
    let mut src_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut offset = 0;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_shape[d] * strides[d];
            idx[d] = 0;
        }
    }
    map
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn value(&self) -> Tensor<E> {
        self.graph.with_value(self.id, |v| v.clone().with_requires_grad(false))
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g, E>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands belong to different graphs"))
        }
    }

    fn matmul_impl(&self, other: &Var<'g, E>, trans_b: bool) -> Result<Var<'g, E>> {
        self.same_graph(other, "matmul")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (mm, out_shape) = MatMulShape::infer(a.shape(), b.shape(), trans_b)?;
            let mut out = vec![E::zero(); mm.batch * mm.m * mm.n];
            for bi in 0..mm.batch {
                let as_ = &a.data()[mm.a_offset(bi)..][..mm.m * mm.k];
                let bs = &b.data()[mm.b_offset(bi)..][..mm.k * mm.n];
                let c = &mut out[bi * mm.m * mm.n..][..mm.m * mm.n];
                if trans_b {
                    gemm_nt(as_, bs, c, mm.m, mm.k, mm.n);
                } else {
                    gemm_nn(as_, bs, c, mm.m, mm.k, mm.n);
                }
            }
            Tensor::new(out_shape, out)?
        };
        self.graph.push(
            "matmul",
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        )
    }

    /// `self @ other` over the last two axes; leading batch axes must match or be absent on one side.
    pub fn matmul(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.matmul_impl(other, false)
    }

    /// `self @ otherᵀ` (transpose of the last two axes of `other`).
    pub fn matmul_t(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.matmul_impl(other, true)
    }

    fn binary(&self, other: &Var<'g, E>, name: &'static str, f: impl Fn(E, E) -> E) -> Result<Var<'g, E>> {
        self.same_graph(other, name)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let suffix_ok = b.ndim() <= a.ndim() && a.shape()[a.ndim() - b.ndim()..] == *b.shape();
            if !suffix_ok {
                return Err(Error::shape(
                    name,
                    format!("{:?} does not broadcast onto {:?}", b.shape(), a.shape()),
                ));
            }
            let nb = b.numel();
            let mut data = Vec::with_capacity(a.numel());
            for chunk in a.data().chunks_exact(nb) {
                data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        let op = match name {
            "add" => Op::Add { a: self.id, b: other.id },
            "sub" => Op::Sub { a: self.id, b: other.id },
            _ => Op::Mul { a: self.id, b: other.id },
        };
        self.graph.push(name, value, op, &[self.id, other.id])
    }

    /// Elementwise sum; `other` may broadcast over leading axes of `self`.
    pub fn add(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    fn unary(&self, name: &'static str, op: Op<E>, f: impl Fn(E) -> E) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
        })?;
        self.graph.push(name, value, op, &[self.id])
    }

    pub fn scale(&self, factor: E) -> Result<Var<'g, E>> {
        self.unary("scale", Op::Scale { a: self.id, factor }, |x| x * factor)
    }

    pub fn relu(&self) -> Result<Var<'g, E>> {
        self.unary("relu", Op::Relu { a: self.id }, |x| {
            if x > E::zero() {
                x
            } else {
                E::zero()
            }
        })
    }

    pub fn tanh(&self) -> Result<Var<'g, E>> {
        self.unary("tanh", Op::Tanh { a: self.id }, |x| x.tanh())
    }

    pub fn sigmoid(&self) -> Result<Var<'g, E>> {
        self.unary("sigmoid", Op::Sigmoid { a: self.id }, |x| {
            E::one() / (E::one() + (-x).exp())
        })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| -> Result<Tensor<E>> {
            check_axis("softmax", a.shape(), axis)?;
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let x = a.data();
            let mut y = vec![E::zero(); x.len()];
            if inner == 1 {
                for (xs, ys) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                    let max = xs.iter().copied().fold(E::neg_infinity(), E::max);
                    let mut total = E::zero();
                    for (y, &x) in ys.iter_mut().zip(xs) {
                        *y = (x - max).exp();
                        total += *y;
                    }
                    let inv = E::one() / total;
                    for y in ys.iter_mut() {
                        *y = *y * inv;
                    }
                }
                return Tensor::new(a.shape().to_vec(), y);
            }
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| x[idx(j)]).fold(E::neg_infinity(), E::max);
                    let mut total = E::zero();
                    for j in 0..n {
                        let e = (x[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        y[idx(j)] = y[idx(j)] / total;
                    }
                }
            }
            Tensor::new(a.shape().to_vec(), y)
        })?;
        self.graph.push("softmax", value, Op::Softmax { a: self.id, axis }, &[self.id])
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&self, axis: usize) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| -> Result<Tensor<E>> {
            check_axis("mean", a.shape(), axis)?;
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let x = a.data();
            let nf = E::from_usize(n).unwrap();
            let mut out = vec![E::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += x[(o * n + j) * inner + i];
                    }
                }
            }
            for v in &mut out {
                *v = *v / nf;
            }
            Tensor::new(drop_axis(a.shape(), axis), out)
        })?;
        self.graph.push("mean", value, Op::Mean { a: self.id, axis }, &[self.id])
    }

    /// Max along `axis`; the gradient routes to the first (lowest-index) maximum.
    pub fn max(&self, axis: usize) -> Result<Var<'g, E>> {
        let (value, argmax) = self.graph.with_value(self.id, |a| -> Result<_> {
            check_axis("max", a.shape(), axis)?;
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let x = a.data();
            let mut out = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = (o * n) * inner + i;
                    for j in 1..n {
                        let idx = (o * n + j) * inner + i;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
            Ok((Tensor::new(drop_axis(a.shape(), axis), out)?, argmax))
        })?;
        self.graph.push(
            "max",
            value,
            Op::Max { a: self.id, argmax },
            &[self.id],
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Var<'g, E>> {
        let value = self
            .graph
            .with_value(self.id, |a| Tensor::scalar(a.data().iter().copied().sum()));
        self.graph.push("sum", value, Op::Sum { a: self.id }, &[self.id])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, E>> {
        let shape = shape.into();
        let value = self.graph.with_value(self.id, |a| {
            if shape.iter().product::<usize>() != a.numel() {
                return Err(Error::shape(
                    "reshape",
                    format!("cannot view {:?} as {shape:?}", a.shape()),
                ));
            }
            a.reshape(shape.clone())
        })?;
        self.graph.push("reshape", value, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| {
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            if perm.len() != a.ndim() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(Error::shape(
                    "permute",
                    format!("{perm:?} is not a permutation of rank {}", a.ndim()),
                ));
            }
            let map = permute_index_map(a.shape(), perm);
            let shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
            Tensor::new(shape, map.iter().map(|&s| a.data()[s]).collect())
        })?;
        self.graph.push(
            "permute",
            value,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g, E>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::shape("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| {
            check_axis("narrow", a.shape(), axis)?;
            let (outer, n, inner) = split_axis(a.shape(), axis);
            if len == 0 || start + len > n {
                return Err(Error::shape(
                    "narrow",
                    format!("range {start}..{} outside axis of size {n}", start + len),
                ));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * n + start) * inner..][..len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)
        })?;
        self.graph.push(
            "narrow",
            value,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Causal shift along axis 0: `out[t] = x[t - steps]`, zero for `t < steps`.
    pub fn delay(&self, steps: usize) -> Result<Var<'g, E>> {
        let value = self.graph.with_value(self.id, |a| {
            let t_len = a.shape()[0];
            let row = a.numel() / t_len;
            let mut data = vec![E::zero(); a.numel()];
            for t in steps..t_len {
                data[t * row..][..row].copy_from_slice(&a.data()[(t - steps) * row..][..row]);
            }
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.graph.push("delay", value, Op::Delay { a: self.id, steps }, &[self.id])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: E) -> Result<Var<'g, E>> {
        let (value, inv_std) = self.graph.with_value(self.id, |a| -> Result<_> {
            let n = *a.shape().last().unwrap();
            let nf = E::from_usize(n).unwrap();
            let mut out = Vec::with_capacity(a.numel());
            let mut inv_std = Vec::with_capacity(a.numel() / n);
            for row in a.data().chunks(n) {
                let mean = row.iter().copied().sum::<E>() / nf;
                let var = row.iter().map(|x| (*x - mean) * (*x - mean)).sum::<E>() / nf;
                let inv = E::one() / (var + eps).sqrt();
                out.extend(row.iter().map(|x| (*x - mean) * inv));
                inv_std.push(inv);
            }
            Ok((Tensor::new(a.shape().to_vec(), out)?, inv_std))
        })?;
        self.graph.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                a: self.id,
                inv_std,
            },
            &[self.id],
        )
    }

    /// `-log softmax(self)[class]` over all elements of `self` (treated as a logit vector).
    pub fn cross_entropy(&self, class: usize) -> Result<Var<'g, E>> {
        let (value, probs) = self.graph.with_value(self.id, |a| -> Result<_> {
            let z = a.data();
            if class >= z.len() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("class {class} out of range for {} logits", z.len()),
                ));
            }
            let max = z.iter().copied().fold(E::neg_infinity(), E::max);
            let total: E = z.iter().map(|v| (*v - max).exp()).sum();
            let log_total = total.ln() + max;
            let probs: Vec<E> = z.iter().map(|v| (*v - log_total).exp()).collect();
            Ok((Tensor::scalar(log_total - z[class]), probs))
        })?;
        self.graph.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                a: self.id,
                class,
                probs,
            },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_analytic() {
        let g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        assert_eq!(eye.matmul(&b).unwrap().value().data(), &[2.0, 3.0, 4.0, 5.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(row.matmul(&col).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
        assert!(a.matmul_t(&b).is_ok());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f64>::from_fn(vec![4, 5], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let b = Tensor::<f64>::from_fn(vec![5, 3], |i| ((i * 104729) % 11) as f64 / 11.0 - 0.5);
        let g = Graph::new();
        let c = g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().value();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.at(&[i, j]) - s).abs() < 1e-6);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn gemm_kernels_agree_with_naive_loops(
            m in 1usize..12, p in 1usize..40, q in 1usize..20, seed in 0u64..1000,
        ) {
            let val = |i: usize, salt: u64| {
                let h = (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15 ^ seed ^ salt);
                (h >> 40) as f64 / (1u64 << 24) as f64 - 0.5
            };
            let a: Vec<f64> = (0..m * p).map(|i| val(i, 1)).collect();
            let b: Vec<f64> = (0..p * q).map(|i| val(i, 2)).collect();
            let at = transpose(&a, m, p);
            let bt = transpose(&b, p, q);
            let mut naive = vec![0.0; m * q];
            for i in 0..m {
                for j in 0..q {
                    naive[i * q + j] = (0..p).map(|r| a[i * p + r] * b[r * q + j]).sum();
                }
            }
            let mut nn = vec![0.0; m * q];
            gemm_nn(&a, &b, &mut nn, m, p, q);
            let mut nt = vec![0.0; m * q];
            gemm_nt(&a, &bt, &mut nt, m, p, q);
            let mut tn = vec![0.0; m * q];
            gemm_tn(&at, &b, &mut tn, p, m, q);
            for (k, want) in naive.iter().enumerate() {
                proptest::prop_assert!((nn[k] - want).abs() < 1e-12);
                proptest::prop_assert!((nt[k] - want).abs() < 1e-12);
                proptest::prop_assert!((tn[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(vec![2, 1, 2], |i| i as f64));
        let w = g.constant(t(&[2, 1], &[1.0, 10.0]));
        assert_eq!(a.matmul(&w).unwrap().value().data(), &[10.0, 32.0]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let one = g.constant(t(&[1], &[5.0])).softmax(0).unwrap().value();
        assert_eq!(one.data(), &[1.0]);
        let same = g.constant(t(&[2], &[-3.5, -3.5])).softmax(0).unwrap().value();
        assert_eq!(same.data(), &[0.5, 0.5]);
        let y = g.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12 && (y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new(vec![2, 3], vec![1e4, -1e4, 9999.0, 3e3, 3e3, -1e4]).unwrap())
            .softmax(1)
            .unwrap()
            .value();
        for row in x.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().unwrap().value().data(), &[0.5]);
        assert_eq!(z.tanh().unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let loss = x.relu().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::<f64>::new();
        let frames = g.constant(t(&[2, 2], &[1.0, 3.0, 3.0, 1.0]));
        assert_eq!(frames.mean(0).unwrap().value().data(), &[2.0, 2.0]);
        assert_eq!(frames.max(0).unwrap().value().data(), &[3.0, 3.0]);
        let single = g.constant(t(&[1, 3], &[4.0, 5.0, 6.0]));
        assert_eq!(single.mean(0).unwrap().value().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[3, 1], &[2.0, 2.0, 1.0]));
        let loss = x.max(0).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let grads = g.backward(x.mean(0).unwrap().sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let loss = w.mul(&x).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.wrt(x).is_none());
        assert!(!x.requires_grad());
    }

    #[test]
    fn backward_visits_each_differentiable_node_once() {
        let g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = x.mul(&x).unwrap();
        let z = y.add(&x).unwrap();
        let loss = z.sum().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.visited(), 4);
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn permute_and_narrow_shapes() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = x.permute(&[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), vec![3, 2, 4]);
        assert_eq!(p.value().at(&[2, 1, 3]), x.value().at(&[1, 2, 3]));
        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), vec![2, 2, 4]);
        assert_eq!(n.value().at(&[1, 0, 0]), x.value().at(&[1, 1, 0]));
    }

    #[test]
    fn delay_shifts_rows() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(
            x.delay(2).unwrap().value().data(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(t(&[4], &[0.3; 4])).cross_entropy(1).unwrap();
        assert!((uniform.value().data()[0] - 4f64.ln()).abs() < 1e-12);
        let sure = g.constant(t(&[3], &[1e4, 0.0, 0.0])).cross_entropy(0).unwrap();
        assert!(sure.value().data()[0] < 1e-12);
    }
}
