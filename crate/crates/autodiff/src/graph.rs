use std::sync::Arc;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::dim_err;
use crate::{AutodiffError, Real, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A linear map with a known adjoint, usable as a graph node.
///
/// The adjoint must be taken with respect to the real Euclidean inner
/// product on the flattened buffers.
pub trait LinearOp<T>: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn adjoint(&self, y: &[T]) -> Vec<T>;
}

pub(crate) enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    AvgPool2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulScalar {
        x: Var,
        s: Var,
    },
    DivScalar(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    BceWithLogits {
        a: Var,
        labels: Vec<T>,
    },
    Nrmse {
        x: Var,
        target: Vec<T>,
        err_norm: T,
        ref_norm: T,
    },
    StraightThrough(Var),
    Linear {
        x: Var,
        op: Arc<dyn LinearOp<T>>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, which is
/// therefore a valid topological order; [`Graph::backward`] walks it in
/// reverse exactly once.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accum<T: Real>(slot: &mut Option<Vec<T>>, g: impl IntoIterator<Item = T>, len: usize) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            let v: Vec<T> = g.into_iter().collect();
            debug_assert_eq!(v.len(), len);
            *slot = Some(v);
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Back-propagates from the scalar `loss`. A graph can be differentiated
    /// only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Dense {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            } => {
                if self.rg(x) {
                    let mut dx = vec![T::zero(); rows * n_in];
                    T::gemm(
                        rows,
                        n_out,
                        n_in,
                        T::one(),
                        g,
                        false,
                        self.val(w),
                        true,
                        T::zero(),
                        &mut dx,
                    );
                    accum(&mut grads[x.0], dx, rows * n_in);
                }
                if self.rg(w) {
                    let mut dw = vec![T::zero(); n_in * n_out];
                    T::gemm(
                        n_in,
                        rows,
                        n_out,
                        T::one(),
                        self.val(x),
                        true,
                        g,
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    accum(&mut grads[w.0], dw, n_in * n_out);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); n_out];
                    for r in 0..rows {
                        for (d, &v) in db.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]) {
                            *d += v;
                        }
                    }
                    accum(&mut grads[b.0], db, n_out);
                }
            }
            &Op::Conv2d { x, k, geom, c_out } => {
                let cols = im2col(self.val(x), &geom);
                let (ckk, n) = (geom.col_rows(), geom.col_cols());
                if self.rg(k) {
                    let mut dk = vec![T::zero(); c_out * ckk];
                    T::gemm(
                        c_out,
                        n,
                        ckk,
                        T::one(),
                        g,
                        false,
                        &cols,
                        true,
                        T::zero(),
                        &mut dk,
                    );
                    accum(&mut grads[k.0], dk, c_out * ckk);
                }
                if self.rg(x) {
                    let mut dcols = vec![T::zero(); ckk * n];
                    T::gemm(
                        ckk,
                        c_out,
                        n,
                        T::one(),
                        self.val(k),
                        true,
                        g,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); geom.c_in * geom.h * geom.w];
                    col2im(&dcols, &geom, &mut dx);
                    accum(&mut grads[x.0], dx, geom.c_in * geom.h * geom.w);
                }
            }
            &Op::AddChannelBias { x, b } => {
                if self.rg(x) {
                    accum(&mut grads[x.0], g.iter().copied(), g.len());
                }
                if self.rg(b) {
                    let c = self.val(b).len();
                    let plane = g.len() / c;
                    let db: Vec<T> = g.chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    accum(&mut grads[b.0], db, c);
                }
            }
            &Op::Relu(x) => {
                let xv = self.val(x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() });
                accum(&mut grads[x.0], d, g.len());
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = self.val(x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * slope });
                accum(&mut grads[x.0], d, g.len());
            }
            &Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(&gi, &s)| gi * s * (T::one() - s));
                accum(&mut grads[x.0], d, g.len());
            }
            &Op::AvgPool2 { x, c, h, w } => {
                let quarter = T::from_f64_lossy(0.25);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[(ch * h + i) * w + j] = g[(ch * ho + i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                accum(&mut grads[x.0], dx, c * h * w);
            }
            &Op::Upsample2 { x, c, h, w } => {
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            dx[(ch * h + i / 2) * w + j / 2] += g[(ch * h2 + i) * w2 + j];
                        }
                    }
                }
                accum(&mut grads[x.0], dx, c * h * w);
            }
            &Op::Concat(a, b) => {
                let na = self.val(a).len();
                if self.rg(a) {
                    accum(&mut grads[a.0], g[..na].iter().copied(), na);
                }
                if self.rg(b) {
                    accum(&mut grads[b.0], g[na..].iter().copied(), g.len() - na);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        accum(&mut grads[v.0], g.iter().copied(), g.len());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    accum(&mut grads[a.0], g.iter().copied(), g.len());
                }
                if self.rg(b) {
                    accum(&mut grads[b.0], g.iter().map(|&v| -v), g.len());
                }
            }
            &Op::Scale(x, c) => {
                accum(&mut grads[x.0], g.iter().map(|&v| v * c), g.len());
            }
            &Op::MulScalar { x, s } => {
                let sv = self.val(s)[0];
                if self.rg(x) {
                    accum(&mut grads[x.0], g.iter().map(|&v| v * sv), g.len());
                }
                if self.rg(s) {
                    let ds: T = g.iter().zip(self.val(x)).map(|(&a, &b)| a * b).sum();
                    accum(&mut grads[s.0], [ds], 1);
                }
            }
            &Op::DivScalar(a, b) => {
                let (av, bv) = (self.val(a)[0], self.val(b)[0]);
                if self.rg(a) {
                    accum(&mut grads[a.0], [g[0] / bv], 1);
                }
                if self.rg(b) {
                    accum(&mut grads[b.0], [-g[0] * av / (bv * bv)], 1);
                }
            }
            &Op::Dot(a, b) => {
                let g0 = g[0];
                if self.rg(a) {
                    let bv = self.val(b);
                    accum(&mut grads[a.0], bv.iter().map(|&v| v * g0), bv.len());
                }
                if self.rg(b) {
                    let av = self.val(a);
                    accum(&mut grads[b.0], av.iter().map(|&v| v * g0), av.len());
                }
            }
            &Op::Sum(x) => {
                let n = self.val(x).len();
                accum(&mut grads[x.0], std::iter::repeat_n(g[0], n), n);
            }
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            dx[(o * len + l) * inner + k] = g[o * inner + k] * inv;
                        }
                    }
                }
                accum(&mut grads[x.0], dx, outer * len * inner);
            }
            &Op::Reshape(x) => {
                accum(&mut grads[x.0], g.iter().copied(), g.len());
            }
            Op::BceWithLogits { a, labels } => {
                let av = self.val(*a);
                let scale = g[0] / T::from_usize(av.len()).unwrap();
                let d = av
                    .iter()
                    .zip(labels)
                    .map(|(&ai, &m)| (sigmoid(ai) - m) * scale);
                accum(&mut grads[a.0], d, av.len());
            }
            Op::Nrmse {
                x,
                target,
                err_norm,
                ref_norm,
            } => {
                let xv = self.val(*x);
                if *err_norm > T::zero() {
                    let scale = g[0] / (*err_norm * *ref_norm);
                    let d = xv.iter().zip(target).map(|(&a, &b)| (a - b) * scale);
                    accum(&mut grads[x.0], d, xv.len());
                } else {
                    accum(
                        &mut grads[x.0],
                        std::iter::repeat_n(T::zero(), xv.len()),
                        xv.len(),
                    );
                }
            }
            &Op::StraightThrough(x) => {
                accum(&mut grads[x.0], g.iter().copied(), g.len());
            }
            Op::Linear { x, op } => {
                let n = self.val(*x).len();
                accum(&mut grads[x.0], op.adjoint(g), n);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}
