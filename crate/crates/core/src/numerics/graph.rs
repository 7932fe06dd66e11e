//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Because an operation can only consume nodes that already exist,
//! creation order is a topological order and the reverse pass is a single
//! backwards sweep over the tape.

use std::cell::RefCell;

use rand::Rng;

use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Arguments below this threshold are rejected by [`Var::log`].
pub const LOG_GUARD: f64 = 1e-300;

/// Rows whose L2 norm falls below this are rejected by [`Var::l2_normalize`].
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    MatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Transpose { a: NodeId, ax0: usize, ax1: usize },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Sum { a: NodeId, axis: Option<usize> },
    Exp { a: NodeId },
    Log { a: NodeId },
    Gelu { a: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    Softmax { a: NodeId, axis: usize },
    LogSoftmax { a: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: NodeId, mask: Vec<f64> },
    L2Normalize { a: NodeId, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Vec<f64>>>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradient of the last backward output with respect to `var`.
    ///
    /// `None` before backward, or when no path connects `var` to the output.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }

    /// Like [`Graph::grad`] but returns zeros for disconnected variables.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var).unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    /// Runs the reverse pass from a one-element output.
    ///
    /// A graph supports exactly one backward pass; a second call is an error
    /// rather than silently accumulating.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::NonScalarBackward { shape: out.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if out.requires_grad {
            grads[output.id] = Some(vec![1.0]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

fn accumulate<F>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, f: F)
where
    F: FnOnce(&mut [f64]),
{
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            });
            accumulate(nodes, grads, *b, |gb| {
                let bn = gb.len();
                for (i, y) in g.iter().enumerate() {
                    gb[i % bn] += y;
                }
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let bn = bv.len();
            accumulate(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv[i % bn];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for (i, y) in g.iter().enumerate() {
                    gb[i % bn] += y * av[i];
                }
            });
        }
        Op::Scale { a, c } => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            });
        }
        Op::MatMul { a, b, batch, m, k, n, shared_b } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(nodes, grads, *a, |ga| {
                if *shared_b {
                    // dA = dC · Bᵀ
                    gemm(batch * m, n, k, g, n, 1, bv, 1, n, ga);
                } else {
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            n,
                            1,
                            &bv[t * k * n..],
                            1,
                            n,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                if *shared_b {
                    // dB = Aᵀ · dC
                    gemm(k, batch * m, n, av, 1, k, g, n, 1, gb);
                } else {
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..],
                            1,
                            k,
                            &g[t * m * n..],
                            n,
                            1,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            });
        }
        Op::Transpose { a, ax0, ax1 } => {
            accumulate(nodes, grads, *a, |ga| {
                let out_shape = node.value.shape();
                let perm = swap_perm(out_shape.len(), *ax0, *ax1);
                let back = permute(g, out_shape, &perm);
                ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
            });
        }
        Op::Reshape { a } => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gp[dst + i] += g[src + i];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let in_shape = nodes[*a].value.shape();
            let (outer, total, inner) = split_axis(in_shape, *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Sum { a, axis } => {
            accumulate(nodes, grads, *a, |ga| match axis {
                None => ga.iter_mut().for_each(|x| *x += g[0]),
                Some(axis) => {
                    let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            });
        }
        Op::Exp { a } => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i];
                }
            });
        }
        Op::Log { a } => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / x[i];
                }
            });
        }
        Op::Gelu { a } => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * gelu_grad(x[i]);
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            accumulate(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            ga[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let d = nodes[*gain].value.numel();
            let gamma = nodes[*gain].value.data();
            let rows = inv_std.len();
            accumulate(nodes, grads, *gain, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let df = d as f64;
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let base = r * d;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = g[base + j] * gamma[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[base + j];
                    }
                    for j in 0..d {
                        gx[base + j] +=
                            inv_std[r] / df * (df * dxhat[j] - s1 - xhat[base + j] * s2);
                    }
                }
            });
        }
        Op::Dropout { a, mask } => {
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * mask[i];
                }
            });
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |ga| {
                for (r, norm) in norms.iter().enumerate() {
                    let base = r * d;
                    let dot: f64 = (0..d).map(|j| y[base + j] * g[base + j]).sum();
                    for j in 0..d {
                        ga[base + j] += (g[base + j] - y[base + j] * dot) / norm;
                    }
                }
            });
        }
    }
}

/// `c += a · b` for an `m×k` by `k×n` product with arbitrary strides; `c` is
/// dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_end = (m - 1) * rsa + (k - 1) * csa;
    let b_end = (k - 1) * rsb + (n - 1) * csb;
    assert!(a_end < a.len() && b_end < b.len() && m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn swap_perm(nd: usize, ax0: usize, ax1: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(ax0, ax1);
    perm
}

/// Permutes the axes of a row-major array; `out.shape[i] = shape[perm[i]]`.
fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// True when `b` equals `a` or is a trailing suffix of it.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b && (!b.is_empty() || a.is_empty())
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Reads the value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    fn unary<F>(&self, f: F) -> Result<(Tensor, bool)>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        Ok((f(&node.value)?, node.requires_grad))
    }

    /// Elementwise sum; `other` may also be a trailing suffix of `self`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !broadcastable(a.shape(), b.shape()) {
                return Err(Error::shape(
                    "add",
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            let bd = b.data();
            let bn = bd.len();
            let data = a.data().iter().enumerate().map(|(i, x)| x + bd[i % bn]).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.graph.needs_grad(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::Add { a: self.id, b: other.id }, rg))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.add(other.scale(-1.0))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if !broadcastable(a.shape(), b.shape()) {
                return Err(Error::shape(
                    "mul",
                    format!("{:?} * {:?}", a.shape(), b.shape()),
                ));
            }
            let bd = b.data();
            let bn = bd.len();
            let data = a.data().iter().enumerate().map(|(i, x)| x * bd[i % bn]).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.graph.needs_grad(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::Mul { a: self.id, b: other.id }, rg))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let (value, rg) = self
            .unary(|t| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| c * x).collect())
            })
            .expect("scale preserves shape");
        self.graph.push(value, Op::Scale { a: self.id, c }, rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`. `other` is either `[k, n]`, shared across all
    /// leading axes, or `[.., k, n]` with the same leading axes as `self`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (value, batch, m, k, n, shared_b) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let lead = &sa[..sa.len() - 2];
            let shared_b = sb.len() == 2;
            if kb != k || (!shared_b && sb[..sb.len() - 2] != *lead) {
                return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
            }
            let batch: usize = lead.iter().product();
            let mut out = vec![0.0; batch * m * n];
            if shared_b {
                gemm(batch * m, k, n, a.data(), k, 1, b.data(), n, 1, &mut out);
            } else {
                for t in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[t * m * k..],
                        k,
                        1,
                        &b.data()[t * k * n..],
                        n,
                        1,
                        &mut out[t * m * n..(t + 1) * m * n],
                    );
                }
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            (Tensor::new(shape, out)?, batch, m, k, n, shared_b)
        };
        let rg = self.graph.needs_grad(&[self.id, other.id]);
        Ok(self.graph.push(
            value,
            Op::MatMul { a: self.id, b: other.id, batch, m, k, n, shared_b },
            rg,
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            check_axis("transpose", t.shape(), ax0)?;
            check_axis("transpose", t.shape(), ax1)?;
            let perm = swap_perm(t.ndim(), ax0, ax1);
            let shape = perm.iter().map(|&p| t.shape()[p]).collect();
            Tensor::new(shape, permute(t.data(), t.shape(), &perm))
        })?;
        Ok(self.graph.push(value, Op::Transpose { a: self.id, ax0, ax1 }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| t.clone().reshaped(shape.to_vec()))?;
        Ok(self.graph.push(value, Op::Reshape { a: self.id }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let shape0 = nodes[first.id].value.shape();
            check_axis("concat", shape0, axis)?;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == shape0.len()
                    && s.iter().zip(shape0).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::shape("concat", format!("{s:?} vs {shape0:?}")));
                }
                total += s[axis];
            }
            let mut shape = shape0.to_vec();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let len = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(shape, data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let rg = graph.needs_grad(&ids);
        Ok(graph.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            check_axis("slice", t.shape(), axis)?;
            let (outer, total, inner) = split_axis(t.shape(), axis);
            if start + len > total {
                return Err(Error::shape(
                    "slice",
                    format!("{start}+{len} exceeds extent {total} of axis {axis}"),
                ));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)
        })?;
        Ok(self.graph.push(value, Op::Slice { a: self.id, axis, start }, rg))
    }

    /// Sum of all entries, as a shape-`[]` scalar.
    pub fn sum(&self) -> Var<'g> {
        let (value, rg) = self
            .unary(|t| Ok(Tensor::scalar(t.data().iter().sum())))
            .expect("sum is total");
        self.graph.push(value, Op::Sum { a: self.id, axis: None }, rg)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            check_axis("sum_axis", t.shape(), axis)?;
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            let x = t.data();
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        data[o * inner + i] += x[(o * n + j) * inner + i];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)
        })?;
        Ok(self.graph.push(value, Op::Sum { a: self.id, axis: Some(axis) }, rg))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.graph.nodes.borrow()[self.id].value.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        Ok(self.sum_axis(axis)?.scale(1.0 / shape[axis].max(1) as f64))
    }

    pub fn exp(&self) -> Var<'g> {
        let (value, rg) = self
            .unary(|t| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.exp()).collect())
            })
            .expect("exp preserves shape");
        self.graph.push(value, Op::Exp { a: self.id }, rg)
    }

    /// Natural log; any argument below [`LOG_GUARD`] is an error.
    pub fn log(&self) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            if let Some(&bad) = t.data().iter().find(|&&x| !(x >= LOG_GUARD)) {
                return Err(Error::LogDomain { value: bad });
            }
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.ln()).collect())
        })?;
        Ok(self.graph.push(value, Op::Log { a: self.id }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        let (value, rg) = self
            .unary(|t| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu(x)).collect())
            })
            .expect("gelu preserves shape");
        self.graph.push(value, Op::Gelu { a: self.id }, rg)
    }

    /// Row lookup in a `[rows, d]` table. The result has shape
    /// `[lead.., d]` where `lead` multiplies out to `ids.len()`.
    pub fn gather(&self, ids: &[usize], lead: &[usize]) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            if t.ndim() != 2 {
                return Err(Error::shape("gather", format!("table shape {:?}", t.shape())));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            if lead.iter().product::<usize>() != ids.len() {
                return Err(Error::shape("gather", format!("{} ids for {lead:?}", ids.len())));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(Error::shape("gather", format!("row {id} >= {rows}")));
                }
                data.extend_from_slice(t.row(id));
            }
            let mut shape = lead.to_vec();
            shape.push(d);
            Tensor::new(shape, data)
        })?;
        Ok(self.graph.push(value, Op::Gather { table: self.id, ids: ids.to_vec() }, rg))
    }

    /// Max-subtracted softmax along `axis`. Non-finite input is an error.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            check_axis("softmax", t.shape(), axis)?;
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "softmax" });
            }
            let mut out = t.data().to_vec();
            for_each_lane(t.shape(), axis, |idx| {
                let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in idx.clone() {
                    out[i] = (out[i] - max).exp();
                    total += out[i];
                }
                for i in idx {
                    out[i] /= total;
                }
            });
            Tensor::new(t.shape().to_vec(), out)
        })?;
        Ok(self.graph.push(value, Op::Softmax { a: self.id, axis }, rg))
    }

    /// Log-softmax along `axis`. Non-finite input is an error.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        let (value, rg) = self.unary(|t| {
            check_axis("log_softmax", t.shape(), axis)?;
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "log_softmax" });
            }
            let mut out = t.data().to_vec();
            for_each_lane(t.shape(), axis, |idx| {
                let max = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = idx.clone().map(|i| (out[i] - max).exp()).sum::<f64>().ln() + max;
                for i in idx {
                    out[i] -= lse;
                }
            });
            Tensor::new(t.shape().to_vec(), out)
        })?;
        Ok(self.graph.push(value, Op::LogSoftmax { a: self.id, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        if !(eps > 0.0) {
            return Err(Error::shape("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let (value, xhat, inv_std) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let d = *x.shape().last().unwrap_or(&0);
            if x.ndim() == 0 || d == 0 {
                return Err(Error::shape("layer_norm", "zero-length normalized axis"));
            }
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("gain {:?}/bias {:?} for width {d}", gv.shape(), bv.shape()),
                ));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.graph.needs_grad(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            rg,
        ))
    }

    /// Inverted dropout. `p == 0` returns `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Var<'g>> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::shape("dropout", format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 {
            return Ok(*self);
        }
        let n = self.graph.nodes.borrow()[self.id].value.numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let (value, rg) = self.unary(|t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().zip(&mask).map(|(x, m)| x * m).collect())
        })?;
        Ok(self.graph.push(value, Op::Dropout { a: self.id, mask }, rg))
    }

    /// Scales each row (last axis) to unit L2 norm. Rows with norm below
    /// [`NORM_GUARD`] are an error.
    pub fn l2_normalize(&self) -> Result<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        let t = &nodes[self.id].value;
        let d = *t.shape().last().unwrap_or(&0);
        if t.ndim() == 0 || d == 0 {
            return Err(Error::shape("l2_normalize", "zero-length last axis"));
        }
        let rows = t.numel() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..rows {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= NORM_GUARD) {
                return Err(Error::Degenerate { norm });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.graph.push(value, Op::L2Normalize { a: self.id, norms }, rg))
    }

    /// Pairwise cosine similarity between the rows of `[n, d]` and `[m, d]`.
    pub fn cosine_similarity(&self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.l2_normalize()?;
        let b = other.l2_normalize()?;
        a.matmul(b.transpose(0, 1)?)
    }

    /// Copy of the value with no gradient path back to `self`.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }
}

/// Calls `f` with the flat indices of every 1-d lane along `axis`.
fn for_each_lane<F>(shape: &[usize], axis: usize, mut f: F)
where
    F: FnMut(std::iter::StepBy<std::ops::Range<usize>>),
{
    let (outer, n, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner.max(1)));
        }
    }
}
