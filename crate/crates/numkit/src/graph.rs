//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! Every operation appends a node holding its forward value, so nodes are
//! always in topological order. [`Graph::backward`] sweeps them in reverse,
//! accumulating adjoints only for nodes that depend on a differentiable leaf.
//!
//! Parameters enter a graph through a [`Bound`] store: the first use of a
//! parameter creates a leaf that shares the stored tensor, later uses reuse
//! that leaf, so gradients of recurrent weights accumulate across time steps.

use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{matmul, matmul_grad_lhs, matmul_grad_rhs, same_matrix_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Square => (one + one) * x,
            Unary::Sqrt => one / ((one + one) * y),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId, T),
    Unary(NodeId, Unary),
    Sum(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
}

enum Value<T> {
    Owned(Tensor<T>),
    Shared(Arc<Tensor<T>>),
}

impl<T> Deref for Value<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A parameter store attached to one graph.
pub struct Bound<'s, T> {
    store: &'s ParamStore<T>,
    slot: usize,
}

impl<T> Bound<'_, T> {
    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// Computation graph for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<Vec<Option<NodeId>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Value<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(Value::Owned(value), op, rg))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Value::Owned(value), Op::Leaf, true)
    }

    /// Attaches a parameter store to this graph.
    pub fn bind<'s>(&mut self, store: &'s ParamStore<T>) -> Bound<'s, T> {
        self.bindings.push(vec![None; store.len()]);
        Bound {
            store,
            slot: self.bindings.len() - 1,
        }
    }

    /// Leaf node for a bound parameter, created on first use.
    pub fn param(&mut self, bound: &Bound<'_, T>, id: ParamId) -> NodeId {
        if let Some(n) = self.bindings[bound.slot][id.index()] {
            return n;
        }
        let n = self.push(Value::Shared(bound.store.shared(id)), Op::Leaf, true);
        self.bindings[bound.slot][id.index()] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = matmul(self.value(a), self.value(b))?;
        self.push_op("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m × n` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push_op("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        same_matrix_shape(name, av, bv)?;
        let v = av.zip_map(bv, f);
        self.push_op(name, v, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| v * k);
        self.push_op("scale", v, Op::Scale(x, k), &[x])
    }

    pub fn shift(&mut self, x: NodeId, k: T) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| v + k);
        self.push_op("shift", v, Op::Shift(x, k), &[x])
    }

    pub fn unary(&mut self, x: NodeId, f: Unary) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| f.apply(v));
        self.push_op(f.name(), v, Op::Unary(x, f), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Softplus)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Square)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", v, Op::Sum(x), &[x])
    }

    /// Joins inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        self.push_op("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if len == 0 || start + len > cols {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} of {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let v = Tensor::new(vec![rows, len], data)?;
        self.push_op("slice_cols", v, Op::SliceCols(x, start, len), &[x])
    }

    /// Stacks inputs with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.push_op("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if len == 0 || start + len > rows {
            return Err(Error::InvalidShape(format!(
                "slice {start}..{} of {rows} rows",
                start + len
            )));
        }
        let v = Tensor::new(vec![len, cols], xv.data()[start * cols..(start + len) * cols].to_vec())?;
        self.push_op("slice_rows", v, Op::SliceRows(x, start, len), &[x])
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        matmul_grad_lhs(&g, bv, self.slot(&mut grads, *a));
                    }
                    if self.rg(*b) {
                        matmul_grad_rhs(av, &g, self.slot(&mut grads, *b));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*x) {
                        self.slot(&mut grads, *x).add_assign(&g);
                    }
                    if self.rg(*b) {
                        let n = g.cols();
                        let acc = self.slot(&mut grads, *b).data_mut();
                        for row in g.data().chunks(n) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        self.slot(&mut grads, *a).add_assign(&g);
                    }
                    if self.rg(*b) {
                        self.slot(&mut grads, *b).add_assign(&g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        self.slot(&mut grads, *a).add_assign(&g);
                    }
                    if self.rg(*b) {
                        let acc = self.slot(&mut grads, *b).data_mut();
                        for (a, &v) in acc.iter_mut().zip(g.data()) {
                            *a -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        accumulate(self.slot(&mut grads, *a), g.data(), bv.data(), |g, y| g * y);
                    }
                    if self.rg(*b) {
                        accumulate(self.slot(&mut grads, *b), g.data(), av.data(), |g, x| g * x);
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        accumulate(self.slot(&mut grads, *a), g.data(), bv.data(), |g, y| g / y);
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -out / b
                        let out = node.value.data();
                        let acc = self.slot(&mut grads, *b).data_mut();
                        for ((a, &gv), (&o, &y)) in acc.iter_mut().zip(g.data()).zip(out.iter().zip(bv.data())) {
                            *a -= gv * o / y;
                        }
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    if self.rg(*x) {
                        let acc = self.slot(&mut grads, *x).data_mut();
                        for (a, &v) in acc.iter_mut().zip(g.data()) {
                            *a += k * v;
                        }
                    }
                }
                Op::Shift(x, _) => {
                    if self.rg(*x) {
                        self.slot(&mut grads, *x).add_assign(&g);
                    }
                }
                Op::Unary(x, f) => {
                    if self.rg(*x) {
                        let f = *f;
                        let xv = self.value(*x).data();
                        let yv = node.value.data();
                        let acc = self.slot(&mut grads, *x).data_mut();
                        for (((a, &gv), &xi), &yi) in acc.iter_mut().zip(g.data()).zip(xv).zip(yv) {
                            *a += gv * f.derivative(xi, yi);
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.rg(*x) {
                        let gv = g.data()[0];
                        for a in self.slot(&mut grads, *x).data_mut() {
                            *a += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.rg(*p) {
                            let acc = self.slot(&mut grads, *p).data_mut();
                            for r in 0..rows {
                                let src = &g.data()[r * total + offset..r * total + offset + w];
                                for (a, &v) in acc[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *a += v;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    if self.rg(*x) {
                        let cols = self.value(*x).cols();
                        let (start, len) = (*start, *len);
                        let acc = self.slot(&mut grads, *x).data_mut();
                        for (r, src) in g.data().chunks(len).enumerate() {
                            for (a, &v) in acc[r * cols + start..r * cols + start + len].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.rg(*p) {
                            let acc = self.slot(&mut grads, *p).data_mut();
                            for (a, &v) in acc.iter_mut().zip(&g.data()[offset..offset + n]) {
                                *a += v;
                            }
                        }
                        offset += n;
                    }
                }
                Op::SliceRows(x, start, len) => {
                    if self.rg(*x) {
                        let cols = self.value(*x).cols();
                        let (start, len) = (*start, *len);
                        let acc = self.slot(&mut grads, *x).data_mut();
                        for (a, &v) in acc[start * cols..(start + len) * cols].iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], id: NodeId) -> &'g mut Tensor<T> {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()))
    }
}

fn accumulate<T: Scalar>(acc: &mut Tensor<T>, g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for ((a, &gv), &o) in acc.data_mut().iter_mut().zip(g).zip(other) {
        *a += f(gv, o);
    }
}

/// Adjoints produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<Vec<Option<NodeId>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of a bound store, in store order.
    /// Parameters the loss never touched get zeros.
    pub fn params(&self, bound: &Bound<'_, T>) -> Vec<Tensor<T>> {
        bound
            .store
            .ids()
            .map(|pid| {
                self.bindings[bound.slot][pid.index()]
                    .and_then(|n| self.grads[n.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(bound.store.get(pid).shape()))
            })
            .collect()
    }
}
