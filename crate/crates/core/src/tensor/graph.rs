use std::borrow::Cow;
use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::param::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Index-sentinel for gather maps: the output element is zero.
pub(crate) const ZERO_TAP: u32 = u32::MAX;

/// Per-axis interpolation taps: `(i0, i1, w0, w1)` for each output index.
pub(crate) type Taps = Vec<(usize, usize, f64, f64)>;

/// Split of a shape around one axis: `outer x len x inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisSplit {
    pub fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    pub fn index(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// `x * s` with `s` a one-element tensor.
    Scale(Var, Var),
    /// `x[r, c] + b[r]`.
    AddRowBias(Var, Var),
    /// `x[r, c] * g[r]`.
    MulRowScale(Var, Var),
    MatMul(Var, Var),
    /// `out[i] = x[idx[i]]`, or zero for [`ZERO_TAP`].
    Gather(Var, Arc<[u32]>),
    /// Concatenation of rank-2 inputs along columns.
    ConcatCols(Vec<Var>),
    /// Concatenation along rows (any rank; flat append).
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Softmax(Var, AxisSplit),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    /// Standardization along an axis; caches `1/sigma` per slice.
    Normalize(Var, AxisSplit, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, AxisSplit),
    Bilinear {
        x: Var,
        channels: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        ty: Arc<Taps>,
        tx: Arc<Taps>,
    },
    BceWithLogits(Var, Arc<[f64]>),
    Mse(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Scale(a, b)
            | AddRowBias(a, b)
            | MulRowScale(a, b)
            | MatMul(a, b)
            | Mse(a, b) => vec![*a, *b],
            AddScalar(a)
            | MulScalar(a, _)
            | Gather(a, _)
            | Reshape(a)
            | Softmax(a, _)
            | Sigmoid(a)
            | Gelu(a)
            | Relu(a)
            | Normalize(a, _, _)
            | Sum(a)
            | Mean(a)
            | MeanAxis(a, _)
            | BceWithLogits(a, _) => vec![*a],
            Bilinear { x, .. } => vec![*x],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

pub(crate) struct Node<'a> {
    pub value: Cow<'a, Tensor>,
    pub op: Op,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A graph borrows parameter values from a [`ParamStore`]
/// without copying them.
#[derive(Default)]
pub struct Graph<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrow a parameter into the graph as a differentiable leaf.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(&store.get(id).value),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of the leaf `v`, if any backward pass reached it.
    /// Gradients of intermediate results are not retained.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let buf = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), buf.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Populate gradients of every differentiable leaf ancestor of the scalar
    /// `loss`.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            local[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            // interior buffers are dead once propagated
            if matches!(self.nodes[i].op, Op::Leaf) {
                local[i] = Some(g);
            }
        }
        if self.grads.len() < n {
            self.grads.resize_with(n, || None);
        }
        for (i, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Add the gradients of all parameter leaves into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(Some(g))) = (node.param, self.grads.get(i)) else {
                continue;
            };
            grads
                .get_mut(id)
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = local[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((x, y), z)| *x += y * z)
                });
                acc(*b, &mut |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((x, y), z)| *x += y * z)
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulScalar(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::Scale(x, s) => {
                let (xv, sv) = (val(*x), val(*s)[0]);
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += sv * q)
                });
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(xv).map(|(p, q)| p * q).sum::<f64>()
                });
            }
            Op::AddRowBias(x, b) => {
                let cols = node.value.rows_cols().1;
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        d[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulRowScale(x, s) => {
                let cols = node.value.rows_cols().1;
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |d| {
                    for (r, (dr, gr)) in d.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        dr.iter_mut().zip(gr).for_each(|(p, q)| *p += sv[r] * q);
                    }
                });
                acc(*s, &mut |d| {
                    for (r, (gr, xr)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        d[r] += gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.rows_cols();
                let n = self.nodes[b.0].value.rows_cols().1;
                let (av, bv) = (val(*a), val(*b));
                // dA = G * B^T ; dB = A^T * G
                acc(*a, &mut |d| {
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::row_major(g, n),
                        MatRef::transposed(bv, n),
                        1.0,
                        d,
                    )
                });
                acc(*b, &mut |d| {
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::transposed(av, k),
                        MatRef::row_major(g, n),
                        1.0,
                        d,
                    )
                });
            }
            Op::Gather(x, idx) => acc(*x, &mut |d| {
                for (gi, &src) in g.iter().zip(idx.iter()) {
                    if src != ZERO_TAP {
                        d[src as usize] += gi;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let cols = node.value.rows_cols().1;
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.rows_cols().1;
                    acc(*p, &mut |d| {
                        for (dr, gr) in d.chunks_mut(pc).zip(g.chunks(cols)) {
                            add_into(dr, &gr[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Softmax(x, s) => acc(*x, &mut |d| {
                for o in 0..s.outer {
                    for inn in 0..s.inner {
                        let dot: f64 = (0..s.len)
                            .map(|l| g[s.index(o, l, inn)] * out[s.index(o, l, inn)])
                            .sum();
                        for l in 0..s.len {
                            let j = s.index(o, l, inn);
                            d[j] += out[j] * (g[j] - dot);
                        }
                    }
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((p, gi), y) in d.iter_mut().zip(g).zip(out) {
                    *p += gi * y * (1.0 - y);
                }
            }),
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((p, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *p += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((p, gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *p += gi;
                        }
                    }
                });
            }
            Op::Normalize(x, s, inv_std) => acc(*x, &mut |d| {
                let len = s.len as f64;
                for o in 0..s.outer {
                    for inn in 0..s.inner {
                        let slice = o * s.inner + inn;
                        let (mut mg, mut mgy) = (0.0, 0.0);
                        for l in 0..s.len {
                            let j = s.index(o, l, inn);
                            mg += g[j];
                            mgy += g[j] * out[j];
                        }
                        mg /= len;
                        mgy /= len;
                        for l in 0..s.len {
                            let j = s.index(o, l, inn);
                            d[j] += inv_std[slice] * (g[j] - mg - out[j] * mgy);
                        }
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|p| *p += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::MeanAxis(x, s) => acc(*x, &mut |d| {
                let len = s.len as f64;
                for o in 0..s.outer {
                    for l in 0..s.len {
                        for inn in 0..s.inner {
                            d[s.index(o, l, inn)] += g[o * s.inner + inn] / len;
                        }
                    }
                }
            }),
            Op::Bilinear {
                x,
                channels,
                in_hw,
                out_hw,
                ty,
                tx,
            } => acc(*x, &mut |d| {
                let (ih, iw) = *in_hw;
                let (oh, ow) = *out_hw;
                for c in 0..*channels {
                    let src = &mut d[c * ih * iw..(c + 1) * ih * iw];
                    let gc = &g[c * oh * ow..(c + 1) * oh * ow];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let gi = gc[oy * ow + ox];
                            src[y0 * iw + x0] += gi * wy0 * wx0;
                            src[y0 * iw + x1] += gi * wy0 * wx1;
                            src[y1 * iw + x0] += gi * wy1 * wx0;
                            src[y1 * iw + x1] += gi * wy1 * wx1;
                        }
                    }
                }
            }),
            Op::BceWithLogits(x, target) => {
                let xv = val(*x);
                let n = xv.len() as f64;
                acc(*x, &mut |d| {
                    for ((p, &z), &t) in d.iter_mut().zip(xv).zip(target.iter()) {
                        *p += g[0] * (sigmoid(z) - t) / n;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = av.len() as f64;
                let scale = 2.0 * g[0] / n;
                acc(*a, &mut |d| {
                    for ((p, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *p += scale * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((p, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *p -= scale * (x - y);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
