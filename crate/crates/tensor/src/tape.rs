//! Wengert-list reverse-mode autodiff.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes only
//! reference earlier nodes, so the list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep. A tape supports exactly one
//! backward pass; build a fresh tape for the next forward.

use std::cell::{Cell, RefCell};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: ElementwiseKind,
        a: usize,
        b: usize,
        /// `b` is a single value broadcast over `a`.
        broadcast: bool,
    },
    Scale(usize, f32),
    MatMul(usize, usize),
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        /// Per-row 1/sqrt(var + eps).
        rstd: Vec<f32>,
    },
    Concat(usize, usize),
    Slice {
        x: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f32>>>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf. Gradient tracking follows `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        self.push(value, Op::Leaf, tensor.requires_grad)
    }

    /// Registers a leaf that takes ownership of its data.
    pub fn leaf_owned(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad;
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf_owned(tensor.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check(&loss)?;
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves keep their gradients; interior buffers are dropped.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        *self.grads.borrow_mut() = grads;
        self.consumed.set(true);
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f32>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    /// Copies the gradient of `v` into `target.grad`, accumulating if present.
    pub fn write_grad(&self, v: Var<'_>, target: &mut Tensor) {
        let grads = self.grads.borrow();
        let Some(Some(g)) = grads.get(v.id) else {
            return;
        };
        match &mut target.grad {
            Some(acc) if acc.len() == g.len() => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.clone()),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: usize, delta: Vec<f32>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::Binary {
            kind,
            a,
            b,
            broadcast,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if needs(a) {
                let da = match kind {
                    ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
                    ElementwiseKind::Mul if broadcast => g.iter().map(|x| x * bv[0]).collect(),
                    ElementwiseKind::Mul => g.iter().zip(bv).map(|(x, y)| x * y).collect(),
                };
                accumulate(grads, a, da);
            }
            if needs(b) {
                let sign = if kind == ElementwiseKind::Sub { -1.0 } else { 1.0 };
                let db: Vec<f32> = match kind {
                    ElementwiseKind::Add | ElementwiseKind::Sub => {
                        g.iter().map(|x| sign * x).collect()
                    }
                    ElementwiseKind::Mul => g.iter().zip(av).map(|(x, y)| x * y).collect(),
                };
                let db = if broadcast {
                    vec![db.iter().map(|&v| f64::from(v)).sum::<f64>() as f32]
                } else {
                    db
                };
                accumulate(grads, b, db);
            }
        }
        &Op::Scale(a, c) => {
            if needs(a) {
                accumulate(grads, a, g.iter().map(|x| x * c).collect());
            }
        }
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dims2().expect("matmul lhs rank");
            let n = nodes[b].value.dims2().expect("matmul rhs rank").1;
            if needs(a) {
                // dA = G · Bᵀ
                let bv = nodes[b].value.data();
                let da = gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize));
                accumulate(grads, a, da);
            }
            if needs(b) {
                // dB = Aᵀ · G
                let av = nodes[a].value.data();
                let db = gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1));
                accumulate(grads, b, db);
            }
        }
        &Op::Relu(a) => {
            if needs(a) {
                let x = nodes[a].value.data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, a, d);
            }
        }
        &Op::Silu(a) => {
            if needs(a) {
                let x = nodes[a].value.data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, a, d);
            }
        }
        &Op::Tanh(a) => {
            if needs(a) {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                accumulate(grads, a, d);
            }
        }
        &Op::Square(a) => {
            if needs(a) {
                let x = nodes[a].value.data();
                let d = g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                accumulate(grads, a, d);
            }
        }
        &Op::Sum(a) => {
            if needs(a) {
                accumulate(grads, a, vec![g[0]; nodes[a].value.len()]);
            }
        }
        &Op::Mean(a) => {
            if needs(a) {
                let n = nodes[a].value.len();
                accumulate(grads, a, vec![g[0] / n as f32; n]);
            }
        }
        Op::LayerNorm { x, rstd } => {
            let x = *x;
            if needs(x) {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gy, yy) = (&g[span.clone()], &y[span.clone()]);
                    let mean_g = gy.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
                    let mean_gy = gy
                        .iter()
                        .zip(yy)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        / cols as f64;
                    for (j, out) in dx[span].iter_mut().enumerate() {
                        *out = (f64::from(rs)
                            * (f64::from(gy[j]) - mean_g - f64::from(yy[j]) * mean_gy))
                            as f32;
                    }
                }
                accumulate(grads, x, dx);
            }
        }
        &Op::Concat(a, b) => {
            let (rows, ca) = nodes[a].value.dims2().expect("concat lhs rank");
            let cb = nodes[b].value.dims2().expect("concat rhs rank").1;
            let cols = ca + cb;
            if needs(a) {
                let mut d = Vec::with_capacity(rows * ca);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * cols..r * cols + ca]);
                }
                accumulate(grads, a, d);
            }
            if needs(b) {
                let mut d = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    d.extend_from_slice(&g[r * cols + ca..(r + 1) * cols]);
                }
                accumulate(grads, b, d);
            }
        }
        &Op::Slice { x, start } => {
            if needs(x) {
                let (rows, cols) = nodes[x].value.dims2().expect("slice rank");
                let width = node.value.dims2().expect("slice rank").1;
                let mut d = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(grads, x, d);
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C[m×n] = A[m×k] · B[k×n]` with arbitrary strides, accumulated in f64.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
) -> Vec<f32> {
    let a64: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let b64: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    let mut c = vec![0.0f64; m * n];
    // SAFETY: the buffers hold m·k, k·n and m·n elements and the strides
    // describe layouts that stay inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            a_strides.0,
            a_strides.1,
            b64.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c.into_iter().map(|v| v as f32).collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        Tensor::from_parts(v.shape().to_vec(), v.data().to_vec())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f32 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            (f(&node.value), node.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn map(&self, op: Op, f: impl Fn(f32) -> f32) -> Var<'t> {
        self.unary(op, |t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        })
    }

    /// Elementwise `a ∘ b`. `b` must match `a`'s shape or hold a single value.
    pub fn elementwise(&self, kind: ElementwiseKind, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let (value, broadcast, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let broadcast = if a.value.shape() == b.value.shape() {
                false
            } else if b.value.is_scalar() {
                true
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: "elementwise",
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            };
            let av = a.value.data();
            let bv = b.value.data();
            let f = |x: f32, y: f32| match kind {
                ElementwiseKind::Add => x + y,
                ElementwiseKind::Sub => x - y,
                ElementwiseKind::Mul => x * y,
            };
            let data = if broadcast {
                av.iter().map(|&x| f(x, bv[0])).collect()
            } else {
                av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
            };
            (
                Tensor::from_parts(a.value.shape().to_vec(), data),
                broadcast,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Add, other)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Sub, other)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Mul, other)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&self, c: f32) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = a.value.dims2()?;
            let (k2, n) = b.value.dims2()?;
            if k != k2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            let data = gemm(
                m,
                k,
                n,
                a.value.data(),
                (k as isize, 1),
                b.value.data(),
                (n as isize, 1),
            );
            (
                Tensor::from_parts(vec![m, n], data),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn silu(&self) -> Var<'t> {
        self.map(Op::Silu(self.id), |v| v * sigmoid(v))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f32::tanh)
    }

    pub fn square(&self) -> Var<'t> {
        self.map(Op::Square(self.id), |v| v * v)
    }

    /// Sum of all elements (f64 accumulator), shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| {
            let s: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
            Tensor::scalar(s as f32)
        })
    }

    /// Mean of all elements (f64 accumulator), shape `[1]`.
    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| {
            let s: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
            Tensor::scalar((s / t.len() as f64) as f32)
        })
    }

    /// Normalizes each row of a rank-2 tensor to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f32) -> Result<Var<'t>> {
        let (value, rstd, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, cols) = node.value.dims2()?;
            let x = node.value.data();
            let mut out = vec![0.0f32; x.len()];
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
                let var = row
                    .iter()
                    .map(|&v| (f64::from(v) - mean).powi(2))
                    .sum::<f64>()
                    / cols as f64;
                let rs = 1.0 / (var + f64::from(eps)).sqrt();
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = ((f64::from(v) - mean) * rs) as f32;
                }
                rstd.push(rs as f32);
            }
            (
                Tensor::from_parts(vec![rows, cols], out),
                rstd,
                node.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::LayerNorm { x: self.id, rstd }, rg))
    }

    /// Concatenates two rank-2 tensors along columns.
    pub fn concat(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (ra, ca) = a.value.dims2()?;
            let (rb, cb) = b.value.dims2()?;
            if ra != rb {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: a.value.shape().to_vec(),
                    rhs: b.value.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(ra * (ca + cb));
            for r in 0..ra {
                data.extend_from_slice(a.value.row_slice(r));
                data.extend_from_slice(b.value.row_slice(r));
            }
            (
                Tensor::from_parts(vec![ra, ca + cb], data),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Concat(self.id, other.id), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, cols) = node.value.dims2()?;
            if start >= end || end > cols {
                return Err(TensorError::SliceBounds { start, end, cols });
            }
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&node.value.row_slice(r)[start..end]);
            }
            (
                Tensor::from_parts(vec![rows, end - start], data),
                node.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Slice { x: self.id, start }, rg))
    }

    /// Value-equal leaf that blocks gradient flow.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.push(value, Op::Leaf, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_two_vectors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_and_self_sub() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 7.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert_eq!(x.mul(&zero).unwrap().value().data(), &[0.0; 3]);
        assert_eq!(x.sub(&x).unwrap().value().data(), &[0.0; 3]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_hand_checked() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
        let c = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(a.matmul(&c).is_err());
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, 9.0]));
        assert_eq!(eye.matmul(&x).unwrap().value(), x.value());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = x.detach().sum();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn detach_product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, -3.0]).with_requires_grad(true));
        let d = x.detach();
        assert_eq!(d.value().data(), x.value().data());
        assert!(!d.requires_grad());
        let loss = d.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0, 2.0, -3.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1.0]).with_requires_grad(true));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(
            tape.backward(x.square()),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn foreign_var_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.constant(Tensor::scalar(1.0));
        let b = t2.constant(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = a.concat(&b).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(0, 2).unwrap().value(), a.value());
        assert!(c.slice(2, 4).is_err());
    }

    #[test]
    fn write_grad_fills_param() {
        let mut p = t(&[2], &[3.0, 4.0]).with_requires_grad(true);
        let tape = Tape::new();
        let v = tape.leaf(&p);
        tape.backward(v.square().sum()).unwrap();
        tape.write_grad(v, &mut p);
        assert_eq!(p.grad.as_deref(), Some(&[6.0, 8.0][..]));
    }
}
