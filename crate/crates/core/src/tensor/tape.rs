//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends a node holding its value and the ids of
//! its inputs. Ids are assigned in creation order, so the node list is a
//! topological order and `backward` is a single reverse sweep.

use super::array::Tensor;
use super::conv::{self, ConvGeom};
use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Relu,
}

/// Index mapping for numpy-style broadcasting between two operands.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub a_index: Vec<usize>,
    pub b_index: Vec<usize>,
}

pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Rbf { x: Var, sigma: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    ConcatChannels { a: Var, b: Var },
    SoftmaxChannels { x: Var },
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Option<Broadcast> },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, factor: f64 },
    Shift { x: Var },
    ClampMin { x: Var, floor: f64 },
    Sum { x: Var },
    ReduceSum { x: Var, out_index: Vec<usize> },
    Gather { x: Var, indices: Vec<usize> },
    MatMul { a: Var, b: Var },
    Reshape { x: Var },
    KdeSums { x: Var, grid: Vec<f64>, alpha: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Rbf { x, sigma } => vec![*x, *sigma],
            Op::ConcatChannels { a, b } | Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::MaxPool2 { x, .. }
            | Op::Upsample2 { x }
            | Op::SoftmaxChannels { x }
            | Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Shift { x }
            | Op::ClampMin { x, .. }
            | Op::Sum { x }
            | Op::ReduceSum { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::KdeSums { x, .. } => vec![*x],
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

/// Gradients of a scalar root with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v` as a tensor; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false, "constant")
    }

    /// A differentiable leaf (parameter or probe input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true, "param")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Fails if any recorded forward value was NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((id, what)) => Err(Error::NonFinite(format!("node {id} ({what}) produced NaN/Inf"))),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, what: &'static str) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad, what)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &'static str) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, what));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(id)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node =
            self.nodes.get(root.0).ok_or_else(|| Error::invalid(format!("root {} is not on this tape", root.0)))?;
        if root_node.value.numel() != 1 {
            return Err(Error::shape(format!("backward root must be scalar, got shape {:?}", root_node.value.shape())));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::InvalidState(format!("cycle: node {id} consumes node {}", input.0)));
                }
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(slot) => slot.iter_mut().zip(&delta).for_each(|(s, d)| *s += d),
            None => grads[v.0] = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let want = (self.wants(*input), self.wants(*weight), self.wants(*bias));
                let (di, dw, db) = conv::backward(geom, val(*input), val(*weight), g, want);
                if let Some(d) = di {
                    self.add_into(grads, *input, d);
                }
                if let Some(d) = dw {
                    self.add_into(grads, *weight, d);
                }
                if let Some(d) = db {
                    self.add_into(grads, *bias, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let xv = val(*x);
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            let xh = (xv[i] - mean[ci]) * inv_std[ci];
                            sum_g[ci] += g[i];
                            sum_gx[ci] += g[i] * xh;
                        }
                    }
                }
                self.accumulate(grads, *gamma, |s| s.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *beta, |s| s.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *x, |dx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let k = gm[ci] * inv_std[ci];
                            for i in base..base + hw {
                                if *batch_stats {
                                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                                    dx[i] += k * (g[i] - sum_g[ci] / m - xh * sum_gx[ci] / m);
                                } else {
                                    dx[i] += k * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Rbf { x, sigma } => {
                let (_, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                let xv = val(*x);
                let sv: Vec<f64> = val(*sigma).iter().map(|s| super::ops::rbf_scale(*s)).collect();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..xv.len() {
                        let s = sv[(i / hw) % c];
                        dx[i] += g[i] * out[i] * (-2.0 * xv[i] / (s * s));
                    }
                });
                let raw = val(*sigma);
                self.accumulate(grads, *sigma, |ds| {
                    for i in 0..xv.len() {
                        let ci = (i / hw) % c;
                        // Clamped magnitudes pass no gradient.
                        if raw[ci].abs() < super::ops::RBF_MIN_SIGMA {
                            continue;
                        }
                        let s = sv[ci];
                        ds[ci] += g[i] * out[i] * 2.0 * xv[i] * xv[i] / (s * s * s);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |dx| {
                    for (o, src) in argmax.iter().enumerate() {
                        dx[*src] += g[o];
                    }
                });
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                self.accumulate(grads, *x, |dx| {
                    let w2 = 2 * w;
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..w2 {
                                dx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().unwrap();
                let cb = self.nodes[b.0].value.shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                self.accumulate(grads, *a, |da| {
                    for ni in 0..n {
                        let src = &g[ni * ct * hw..ni * ct * hw + ca * hw];
                        da[ni * ca * hw..(ni + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ni in 0..n {
                        let src = &g[ni * ct * hw + ca * hw..(ni + 1) * ct * hw];
                        db[ni * cb * hw..(ni + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::SoftmaxChannels { x } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                self.accumulate(grads, *x, |dx| {
                    for ni in 0..n {
                        for p in 0..hw {
                            let idx = |ci: usize| (ni * c + ci) * hw + p;
                            let dot: f64 = (0..c).map(|ci| g[idx(ci)] * out[idx(ci)]).sum();
                            for ci in 0..c {
                                dx[idx(ci)] += out[idx(ci)] * (g[idx(ci)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = val(*a);
                let bv = val(*b);
                let n = out.len();
                let ai = |i: usize| bcast.as_ref().map_or(i, |bc| bc.a_index[i]);
                let bi = |i: usize| bcast.as_ref().map_or(i, |bc| bc.b_index[i]);
                self.accumulate(grads, *a, |da| {
                    for i in 0..n {
                        let (ia, ib) = (ai(i), bi(i));
                        da[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[ib],
                            BinaryKind::Div => g[i] / bv[ib],
                        };
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..n {
                        let (ia, ib) = (ai(i), bi(i));
                        db[ib] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[ia],
                            BinaryKind::Div => -g[i] * av[ia] / (bv[ib] * bv[ib]),
                        };
                    }
                });
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..out.len() {
                        dx[i] += g[i]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Exp => out[i],
                                UnaryKind::Ln => 1.0 / xv[i],
                                UnaryKind::Sqrt => {
                                    if out[i] > 0.0 {
                                        0.5 / out[i]
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Square => 2.0 * xv[i],
                                UnaryKind::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor));
            }
            Op::Shift { x } | Op::Reshape { x } => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::ClampMin { x, floor } => {
                let xv = val(*x);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > *floor {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::ReduceSum { x, out_index } => {
                self.accumulate(grads, *x, |dx| {
                    for (i, o) in out_index.iter().enumerate() {
                        dx[i] += g[*o];
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accumulate(grads, *x, |dx| {
                    for (o, src) in indices.iter().enumerate() {
                        dx[*src] += g[o];
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |da| {
                    gemm(MatRef::row_major(g, m, n), MatRef::transposed(bv, k, n), da, 1.0)
                });
                self.accumulate(grads, *b, |db| {
                    gemm(MatRef::transposed(av, m, k), MatRef::row_major(g, m, n), db, 1.0)
                });
            }
            Op::KdeSums { x, grid, alpha } => {
                let xv = val(*x);
                self.accumulate(grads, *x, |dx| {
                    for (i, u) in xv.iter().enumerate() {
                        let (lo, hi) = super::ops::kde_support(grid, *u, *alpha);
                        let mut acc = 0.0;
                        for (j, gj) in grid.iter().enumerate().take(hi).skip(lo) {
                            let d = gj - u;
                            acc += g[j] * (-alpha * d * d).exp() * 2.0 * alpha * d;
                        }
                        dx[i] += acc;
                    }
                });
            }
        }
    }
}
