//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node whose inputs all precede it,
//! so node order is already a topological order. [`Graph::backward`] walks
//! the nodes once in reverse and accumulates gradients additively, which is
//! what makes a tensor used twice receive both contributions.
//!
//! ```
//! use gma_core::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![2.0]));
//! let y = x.mul(x).unwrap().sum();
//! g.backward(y).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[4.0]);
//! ```

use std::cell::RefCell;
use std::fmt;

use crate::error::{contract, Error, Result};
use crate::tensor::{broadcast_shape, gemm, numel, split_axis, validate_shape, Broadcast, Tensor};

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    CumSum {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// Leaf gradients after a backward pass; `None` until one has run.
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Recording tape for one forward computation.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf; it tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    /// Clears leaf gradients so that `backward` may run again.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grads = None;
    }

    /// Propagates gradients from the scalar `root` to every leaf that
    /// requires them. A second call without [`Graph::zero_grad`] is an error.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        assert!(
            std::ptr::eq(root.graph, self),
            "root belongs to another graph"
        );
        let inner = self.inner.borrow();
        if inner.grads.is_some() {
            return contract("backward called twice without zero_grad");
        }
        let nodes = &inner.nodes;
        if nodes[root.id].data.len() != 1 {
            return contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(nodes, node, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        drop(inner);
        self.inner.borrow_mut().grads = Some(grads);
        Ok(())
    }
}

fn acc<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].data.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(op, a, b) => {
            let (a, b) = (*a, *b);
            let xa = &nodes[a].data;
            let xb = &nodes[b].data;
            let plan = Broadcast::plan(&nodes[a].shape, &nodes[b].shape, &node.shape);
            if let Some(ga) = acc(grads, nodes, a) {
                plan.for_each(g.len(), |o, ia, ib| {
                    ga[ia] += match op {
                        BinaryOp::Add | BinaryOp::Sub => g[o],
                        BinaryOp::Mul => g[o] * xb[ib],
                        BinaryOp::Div => g[o] / xb[ib],
                        BinaryOp::Min => {
                            if xa[ia] <= xb[ib] {
                                g[o]
                            } else {
                                0.0
                            }
                        }
                        BinaryOp::Max => {
                            if xa[ia] >= xb[ib] {
                                g[o]
                            } else {
                                0.0
                            }
                        }
                    }
                });
            }
            if let Some(gb) = acc(grads, nodes, b) {
                plan.for_each(g.len(), |o, ia, ib| {
                    gb[ib] += match op {
                        BinaryOp::Add => g[o],
                        BinaryOp::Sub => -g[o],
                        BinaryOp::Mul => g[o] * xa[ia],
                        BinaryOp::Div => -g[o] * xa[ia] / (xb[ib] * xb[ib]),
                        BinaryOp::Min => {
                            if xa[ia] <= xb[ib] {
                                0.0
                            } else {
                                g[o]
                            }
                        }
                        BinaryOp::Max => {
                            if xa[ia] >= xb[ib] {
                                0.0
                            } else {
                                g[o]
                            }
                        }
                    }
                });
            }
        }
        Op::Unary(op, x) => {
            let xs = &nodes[*x].data;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += match op {
                        UnaryOp::Neg => -g[i],
                        UnaryOp::Scale(c) => c * g[i],
                        UnaryOp::AddScalar => g[i],
                        UnaryOp::Exp => g[i] * y[i],
                        UnaryOp::Ln => g[i] / xs[i],
                        UnaryOp::Tanh => g[i] * (1.0 - y[i] * y[i]),
                        UnaryOp::Sigmoid => g[i] * y[i] * (1.0 - y[i]),
                        UnaryOp::Relu => {
                            if xs[i] > 0.0 {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Sqrt => g[i] * 0.5 / y[i],
                        UnaryOp::Square => 2.0 * xs[i] * g[i],
                        UnaryOp::ClampMin(c) => {
                            if xs[i] > *c {
                                g[i]
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for t in 0..len {
                        for i in 0..inner {
                            gx[(o * len + t) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| y[at(t)] * g[at(t)]).sum();
                        for t in 0..len {
                            gx[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let width = *node.shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, grow) in g.chunks(width).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for c in 0..width {
                        let k = r * width + c;
                        gx[k] += grow[c] - y[k].exp() * total;
                    }
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let sa = &nodes[a].shape;
            let sb = &nodes[b].shape;
            let k = sa[sa.len() - 1];
            let n = *node.shape.last().unwrap();
            let xa = &nodes[a].data;
            let xb = &nodes[b].data;
            if sb.len() == 2 {
                let m = xa.len() / k;
                if let Some(ga) = acc(grads, nodes, a) {
                    gemm(m, n, k, g, false, xb, !trans_b, ga, true);
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    if trans_b {
                        gemm(n, m, k, g, true, xa, false, gb, true);
                    } else {
                        gemm(k, m, n, xa, true, g, false, gb, true);
                    }
                }
            } else {
                let m = sa[sa.len() - 2];
                let batches = xa.len() / (m * k);
                if let Some(ga) = acc(grads, nodes, a) {
                    for bt in 0..batches {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bt * m * n..],
                            false,
                            &xb[bt * k * n..],
                            !trans_b,
                            &mut ga[bt * m * k..],
                            true,
                        );
                    }
                }
                if let Some(gb) = acc(grads, nodes, b) {
                    for bt in 0..batches {
                        let (gs, xs) = (&g[bt * m * n..], &xa[bt * m * k..]);
                        let out = &mut gb[bt * k * n..];
                        if trans_b {
                            gemm(n, m, k, gs, true, xs, false, out, true);
                        } else {
                            gemm(k, m, n, xs, true, gs, false, out, true);
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Permute { x, axes } => {
            let map = permute_map(&nodes[*x].shape, axes);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (o, &src) in map.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, len, inner) = split_axis(&nodes[*x].shape, *axis);
            let take = node.shape[*axis];
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    let src = &g[o * take * inner..(o + 1) * take * inner];
                    let dst = (o * len + start) * inner;
                    for (d, s) in gx[dst..dst + take * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].shape[*axis];
                if let Some(gx) = acc(grads, nodes, x) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (d, s) in gx[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Gather { table, ids } => {
            let d = nodes[*table].shape[1];
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
            }
        }
        Op::Pick { x, idx } => {
            let width = *nodes[*x].shape.last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * width + c] += g[r];
                }
            }
        }
        Op::CumSum { x, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut run = 0.0;
                        for t in (0..len).rev() {
                            let k = (o * len + t) * inner + i;
                            run += g[k];
                            gx[k] += run;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let gamma = &nodes[*gain].data;
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (k, &gv) in g.iter().enumerate() {
                    gg[k % d] += gv * xhat[k];
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for (k, &gv) in g.iter().enumerate() {
                    gb[k % d] += gv;
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let base = r * d;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..d {
                        let dxhat = g[base + c] * gamma[c];
                        mean_d += dxhat;
                        mean_dx += dxhat * xhat[base + c];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    for c in 0..d {
                        let dxhat = g[base + c] * gamma[c];
                        gx[base + c] += rs * (dxhat - mean_d - xhat[base + c] * mean_dx);
                    }
                }
            }
        }
    }
}

/// For each output position of a permutation, the source offset in the input.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0; rank];
    let mut off = 0;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].shape.len()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "item() on shape {:?}", node.shape);
        node.data[0]
    }

    /// Reads the node's values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].data)
    }

    /// Snapshot of the value, carrying the gradient when one was computed.
    pub fn value(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone())
            .expect("node shape invariant")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = self.grad_data_inner(&inner) {
            t.set_grad(g).expect("grad shape invariant");
        }
        t
    }

    fn grad_data_inner(&self, inner: &Inner) -> Option<Vec<f64>> {
        let node = &inner.nodes[self.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let grads = inner.grads.as_ref()?;
        Some(
            grads[self.id]
                .clone()
                .unwrap_or_else(|| vec![0.0; node.data.len()]),
        )
    }

    /// Gradient of the last backward pass, for leaves that require it.
    /// Leaves unreachable from the root get a zero gradient.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.graph.inner.borrow();
        let g = self.grad_data_inner(&inner)?;
        Some(Tensor::new(inner.nodes[self.id].shape.clone(), g).expect("grad shape invariant"))
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn binary(self, other: Var<'g>, op: BinaryOp, name: &'static str) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (shape, data) = {
            let inner = self.graph.inner.borrow();
            let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| Error::Shape {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            })?;
            let n = numel(&shape);
            let mut out = vec![0.0; n];
            let (xa, xb) = (&na.data, &nb.data);
            let plan = Broadcast::plan(&na.shape, &nb.shape, &shape);
            plan.for_each(n, |o, ia, ib| {
                out[o] = match op {
                    BinaryOp::Add => xa[ia] + xb[ib],
                    BinaryOp::Sub => xa[ia] - xb[ib],
                    BinaryOp::Mul => xa[ia] * xb[ib],
                    BinaryOp::Div => xa[ia] / xb[ib],
                    BinaryOp::Min => {
                        if xa[ia] <= xb[ib] {
                            xa[ia]
                        } else {
                            xb[ib]
                        }
                    }
                    BinaryOp::Max => {
                        if xa[ia] >= xb[ib] {
                            xa[ia]
                        } else {
                            xb[ib]
                        }
                    }
                }
            });
            (shape, out)
        };
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self
            .graph
            .push(shape, data, Op::Binary(op, self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Div, "div")
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Min, "min")
    }

    pub fn max(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryOp::Max, "max")
    }

    fn unary(self, op: UnaryOp) -> Var<'g> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let f = |x: f64| match op {
                UnaryOp::Neg => -x,
                UnaryOp::Scale(c) => c * x,
                UnaryOp::AddScalar => unreachable!(),
                UnaryOp::Exp => x.exp(),
                UnaryOp::Ln => x.ln(),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Relu => x.max(0.0),
                UnaryOp::Sqrt => x.sqrt(),
                UnaryOp::Square => x * x,
                UnaryOp::ClampMin(c) => x.max(c),
            };
            let data = node.data.iter().map(|&x| f(x)).collect();
            (node.shape.clone(), data, node.requires_grad)
        };
        self.graph.push(shape, data, Op::Unary(op, self.id), rg)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnaryOp::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let data = node.data.iter().map(|&x| x + c).collect();
            (node.shape.clone(), data, node.requires_grad)
        };
        self.graph
            .push(shape, data, Op::Unary(UnaryOp::AddScalar, self.id), rg)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryOp::Exp)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(UnaryOp::Ln)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(UnaryOp::Square)
    }

    /// `max(x, floor)` elementwise; gradient is zero where clamped.
    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        self.unary(UnaryOp::ClampMin(floor))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let (total, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.data.iter().sum::<f64>(), node.requires_grad)
        };
        self.graph.push(vec![1], vec![total], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    fn axis_index(&self, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let a = if axis < 0 { rank + axis } else { axis };
        if a < 0 || a >= rank {
            return contract(format!("axis {axis} invalid for rank {rank}"));
        }
        Ok(a as usize)
    }

    /// Sums along `axis` (negative counts from the end).
    pub fn sum_axis(self, axis: isize, keepdim: bool) -> Result<Var<'g>> {
        let axis = self.axis_index(axis)?;
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let (outer, len, inn) = split_axis(&node.shape, axis);
            let mut out = vec![0.0; outer * inn];
            for o in 0..outer {
                for t in 0..len {
                    let src = &node.data[(o * len + t) * inn..(o * len + t + 1) * inn];
                    for (d, s) in out[o * inn..(o + 1) * inn].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = node.shape.clone();
            if keepdim || shape.len() == 1 {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            (shape, out, node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape, data, Op::SumAxis { x: self.id, axis }, rg))
    }

    pub fn mean_axis(self, axis: isize, keepdim: bool) -> Result<Var<'g>> {
        let a = self.axis_index(axis)?;
        let n = self.shape()[a] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Softmax along `axis`, subtracting the slice maximum first.
    pub fn softmax(self, axis: isize) -> Result<Var<'g>> {
        let axis = self.axis_index(axis)?;
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let (outer, len, inn) = split_axis(&node.shape, axis);
            let mut out = vec![0.0; node.data.len()];
            for o in 0..outer {
                for i in 0..inn {
                    let at = |t: usize| (o * len + t) * inn + i;
                    let max = (0..len)
                        .map(|t| node.data[at(t)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for t in 0..len {
                        let e = (node.data[at(t)] - max).exp();
                        out[at(t)] = e;
                        z += e;
                    }
                    for t in 0..len {
                        out[at(t)] /= z;
                    }
                }
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape, data, Op::Softmax { x: self.id, axis }, rg))
    }

    /// Softmax along the last axis where `keep[c] == false` positions are
    /// excluded from normalization and receive exactly zero weight.
    ///
    /// `keep` has either the length of the last axis (shared by all rows)
    /// or the full element count. A row with nothing kept is an error.
    pub fn masked_softmax(self, keep: &[bool]) -> Result<Var<'g>> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let width = *node.shape.last().unwrap();
            if keep.len() != width && keep.len() != node.data.len() {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: node.shape.clone(),
                    rhs: vec![keep.len()],
                });
            }
            let mut out = vec![0.0; node.data.len()];
            for (r, (row, dst)) in node
                .data
                .chunks(width)
                .zip(out.chunks_mut(width))
                .enumerate()
            {
                let live = |c: usize| {
                    keep[if keep.len() == width {
                        c
                    } else {
                        r * width + c
                    }]
                };
                let max = (0..width)
                    .filter(|&c| live(c))
                    .map(|c| row[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return contract("attention row has every position masked");
                }
                let mut z = 0.0;
                for c in 0..width {
                    if live(c) {
                        dst[c] = (row[c] - max).exp();
                        z += dst[c];
                    }
                }
                dst.iter_mut().for_each(|v| *v /= z);
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        let axis = shape.len() - 1;
        Ok(self
            .graph
            .push(shape, data, Op::Softmax { x: self.id, axis }, rg))
    }

    pub fn log_softmax(self) -> Var<'g> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let width = *node.shape.last().unwrap();
            let mut out = Vec::with_capacity(node.data.len());
            for row in node.data.chunks(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        self.graph.push(shape, data, Op::LogSoftmax(self.id), rg)
    }

    fn matmul_impl(self, other: Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (shape, data) = {
            let inner = self.graph.inner.borrow();
            let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (sa, sb) = (&na.shape, &nb.shape);
            let err = || Error::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(err());
            }
            let k = sa[sa.len() - 1];
            let (kb, n) = if trans_b {
                (sb[sb.len() - 1], sb[sb.len() - 2])
            } else {
                (sb[sb.len() - 2], sb[sb.len() - 1])
            };
            if k != kb {
                return Err(err());
            }
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let mut out = vec![0.0; numel(&shape)];
            if sb.len() == 2 {
                let m = na.data.len() / k;
                gemm(m, k, n, &na.data, false, &nb.data, trans_b, &mut out, false);
            } else {
                if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return Err(err());
                }
                let m = sa[sa.len() - 2];
                let batches = na.data.len() / (m * k);
                for bt in 0..batches {
                    gemm(
                        m,
                        k,
                        n,
                        &na.data[bt * m * k..],
                        false,
                        &nb.data[bt * k * n..],
                        trans_b,
                        &mut out[bt * m * n..],
                        false,
                    );
                }
            }
            (shape, out)
        };
        let rg = self.graph.rg(&[self.id, other.id]);
        Ok(self.graph.push(
            shape,
            data,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    /// Matrix product over the last two axes. `other` is either rank 2
    /// (shared across all leading dimensions of `self`) or has the same
    /// leading batch dimensions.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_impl(other, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        validate_shape(shape)?;
        let (data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            if numel(shape) != node.data.len() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: node.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (node.data.clone(), node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape.to_vec(), data, Op::Reshape(self.id), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let rank = node.shape.len();
            let mut seen = vec![false; rank];
            if axes.len() != rank
                || axes
                    .iter()
                    .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
            {
                return contract(format!("invalid permutation {axes:?} for rank {rank}"));
            }
            let map = permute_map(&node.shape, axes);
            let data = map.iter().map(|&i| node.data[i]).collect();
            let shape = axes.iter().map(|&a| node.shape[a]).collect();
            (shape, data, node.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            data,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let rank = self.rank();
        if rank < 2 {
            return contract("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(self, axis: isize, start: usize, len: usize) -> Result<Var<'g>> {
        let axis = self.axis_index(axis)?;
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let (outer, full, inn) = split_axis(&node.shape, axis);
            if len == 0 || start + len > full {
                return contract(format!(
                    "slice [{start}, {}) outside axis of {full}",
                    start + len
                ));
            }
            let mut out = Vec::with_capacity(outer * len * inn);
            for o in 0..outer {
                let from = (o * full + start) * inn;
                out.extend_from_slice(&node.data[from..from + len * inn]);
            }
            let mut shape = node.shape.clone();
            shape[axis] = len;
            (shape, out, node.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            data,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Running sum along `axis`.
    pub fn cumsum(self, axis: isize) -> Result<Var<'g>> {
        let axis = self.axis_index(axis)?;
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let (outer, len, inn) = split_axis(&node.shape, axis);
            let mut out = node.data.clone();
            for o in 0..outer {
                for t in 1..len {
                    for i in 0..inn {
                        out[(o * len + t) * inn + i] += out[(o * len + t - 1) * inn + i];
                    }
                }
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        Ok(self
            .graph
            .push(shape, data, Op::CumSum { x: self.id, axis }, rg))
    }

    /// Rows `ids` of a `[V × d]` table, as `[len(ids) × d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g>> {
        let (shape, data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            if node.shape.len() != 2 || ids.is_empty() {
                return contract("gather_rows needs a rank-2 table and at least one id");
            }
            let (v, d) = (node.shape[0], node.shape[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Vocab { id, vocab: v });
                }
                out.extend_from_slice(&node.data[id * d..(id + 1) * d]);
            }
            (vec![ids.len(), d], out, node.requires_grad)
        };
        Ok(self.graph.push(
            shape,
            data,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = self[r, idx[r]]` for a `[n × V]` input.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'g>> {
        let (data, rg) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let width = *node.shape.last().unwrap();
            let rows = node.data.len() / width;
            if node.shape.len() != 2 || rows != idx.len() {
                return Err(Error::Shape {
                    op: "pick",
                    lhs: node.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &c) in idx.iter().enumerate() {
                if c >= width {
                    return Err(Error::Vocab {
                        id: c,
                        vocab: width,
                    });
                }
                out.push(node.data[r * width + c]);
            }
            (out, node.requires_grad)
        };
        Ok(self.graph.push(
            vec![idx.len()],
            data,
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(&gain);
        self.same_graph(&bias);
        let (shape, data, xhat, rstd) = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            let d = *node.shape.last().unwrap();
            let (g, b) = (&inner.nodes[gain.id], &inner.nodes[bias.id]);
            if g.data.len() != d || b.data.len() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: node.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let rows = node.data.len() / d;
            let mut out = vec![0.0; node.data.len()];
            let mut xhat = vec![0.0; node.data.len()];
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &node.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for c in 0..d {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * d + c] = xh;
                    out[r * d + c] = xh * g.data[c] + b.data[c];
                }
            }
            (node.shape.clone(), out, xhat, rstd)
        };
        let rg = self.graph.rg(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g>(xs: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
    let graph = first.graph;
    let (shape, data) = {
        let inner = graph.inner.borrow();
        let base = &inner.nodes[first.id].shape;
        if axis >= base.len() {
            return contract(format!(
                "concat axis {axis} invalid for rank {}",
                base.len()
            ));
        }
        let mut total = 0;
        for x in xs {
            first.same_graph(x);
            let s = &inner.nodes[x.id].shape;
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inn) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for x in xs {
                let node = &inner.nodes[x.id];
                let len = node.shape[axis] * inn;
                out.extend_from_slice(&node.data[o * len..(o + 1) * len]);
            }
        }
        (shape, out)
    };
    let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
    let rg = graph.rg(&ids);
    Ok(graph.push(shape, data, Op::Concat { xs: ids, axis }, rg))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match a.matmul(b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_backward_hand_case() {
        let g = Graph::new();
        let a = g.param(t(&[1, 2], &[5.0, -1.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = a.matmul(b).unwrap().sum();
        g.backward(y).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 4]));
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.25; 4]);
        let x = g.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let x = g.constant(Tensor::from_vec(vec![0.0, 3f64.ln()]));
        let y = x.softmax(0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_inner_axis() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = x.softmax(0).unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.3, -0.2, 7.0]));
        let y = x.masked_softmax(&[true, true, false]).unwrap().to_vec();
        assert_eq!(y[2], 0.0);
        assert!((y[0] + y[1] - 1.0).abs() < 1e-12);
        assert!(x.masked_softmax(&[false, false, false]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().item(), 0.5);
        assert_eq!(z.tanh().item(), 0.0);
        let a = g.constant(Tensor::from_vec(vec![3.0, 1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![2.0, 2.0, 2.0]));
        assert_eq!(a.min(b).unwrap().to_vec(), vec![2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        g.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.0]));
        g.backward(x.sigmoid().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25]);
    }

    #[test]
    fn reused_tensor_sums_contributions() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.5]));
        let y = x.add(x).unwrap().sum();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_requires_zero_grad() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = x.square().sum();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_error() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x.exp()), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_and_concat_shapes() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let p = x.transpose().unwrap();
        assert_eq!(p.shape(), vec![3, 2]);
        assert_eq!(p.to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let c = concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.to_vec()[..6], [0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let s = c.slice(1, 2, 2).unwrap();
        assert_eq!(s.to_vec(), vec![2.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn cumsum_and_gather() {
        let g = Graph::new();
        let x = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert_eq!(x.cumsum(0).unwrap().to_vec(), vec![1.0, 3.0, 6.0]);
        let table = g.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(
            table.gather_rows(&[2, 0]).unwrap().to_vec(),
            vec![4.0, 5.0, 0.0, 1.0]
        );
        assert!(matches!(
            table.gather_rows(&[3]),
            Err(Error::Vocab { id: 3, vocab: 3 })
        ));
    }
}
