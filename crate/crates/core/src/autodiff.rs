//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order, so parents always
//! precede children. [`Var`] is a cheap copyable handle into one tape;
//! [`Tape::backward`] walks the records in reverse and returns a gradient for
//! every node that depends on a leaf.
//!
//! A tape is single-threaded. Run independent tapes on independent threads.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{bmm, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    SumAxis(usize),
    SumAll(usize),
    NormLast(usize),
    Softmax(usize),
    LogSoftmax(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::NormLast(..) => "l2_norm",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub(crate) fn take(&mut self, id: usize) -> Tensor<T> {
        self.grads[id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Constant, value, false)
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, needs_grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, op: Op<T>, value: Tensor<T>, parents: &[usize]) -> Var<'_, T> {
        let needs = self.needs(parents);
        self.push(op, value, needs)
    }

    /// First recorded node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat(&refs, axis)?
        };
        Ok(self.record(Op::Concat(ids.clone(), axis), value, &ids))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Constant) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let mut out: Vec<(usize, Tensor<T>)> = Vec::with_capacity(2);
            let mut send = |i: usize, t: Tensor<T>| {
                if nodes[i].needs_grad {
                    out.push((i, t));
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.sum_to_shape(val(*b).shape())?);
                }
                Op::Sub(a, b) => {
                    send(*a, g.sum_to_shape(val(*a).shape())?);
                    send(*b, g.scale(-T::one()).sum_to_shape(val(*b).shape())?);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, g.mul(val(*b))?.sum_to_shape(val(*a).shape())?);
                    }
                    if nodes[*b].needs_grad {
                        send(*b, g.mul(val(*a))?.sum_to_shape(val(*b).shape())?);
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, g.div(val(*b))?.sum_to_shape(val(*a).shape())?);
                    }
                    if nodes[*b].needs_grad {
                        let gb = g.mul(&node.value)?.div(val(*b))?.scale(-T::one());
                        send(*b, gb.sum_to_shape(val(*b).shape())?);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::AddScalar(a) => send(*a, g),
                Op::Exp(a) => send(*a, g.mul(&node.value)?),
                Op::Ln(a) => send(*a, g.div(val(*a))?),
                Op::Sqrt(a) => {
                    let two = T::one() + T::one();
                    send(*a, g.zip_with(&node.value, "sqrt'", |g, y| g / (two * y))?)
                }
                Op::Relu(a) => send(
                    *a,
                    g.zip_with(val(*a), "relu'", |g, x| if x > T::zero() { g } else { T::zero() })?,
                ),
                Op::SumAxis(a) => send(*a, g.broadcast_to(val(*a).shape())?),
                Op::SumAll(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::NormLast(a) => {
                    // d sqrt(sum x^2 + delta) / dx = x / norm
                    let coef = g.div(&node.value)?;
                    send(*a, val(*a).mul(&coef)?);
                }
                Op::Softmax(_) | Op::LogSoftmax(_) => {
                    let (a, soft) = match &node.op {
                        Op::Softmax(a) => (*a, node.value.clone()),
                        Op::LogSoftmax(a) => (*a, node.value.map(|x| x.exp())),
                        _ => unreachable!(),
                    };
                    let last = soft.rank() - 1;
                    let ga = if matches!(node.op, Op::Softmax(_)) {
                        let dot = g.mul(&soft)?.sum_axis(last)?;
                        soft.mul(&g.sub(&dot)?)?
                    } else {
                        let total = g.sum_axis(last)?;
                        g.sub(&soft.mul(&total)?)?
                    };
                    send(a, ga);
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        send(*a, bmm(&g, val(*b), false, true)?.sum_to_shape(val(*a).shape())?);
                    }
                    if nodes[*b].needs_grad {
                        send(*b, bmm(val(*a), &g, true, false)?.sum_to_shape(val(*b).shape())?);
                    }
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
                Op::Permute(a, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    send(*a, g.permute(&inv)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        send(p, g.narrow(*axis, start, len)?);
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let full = val(*a).shape()[*axis];
                    send(*a, g.pad_axis(*axis, *start, full)?);
                }
            }
            for (i, t) in out {
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Runs `f` on a fresh tape and returns the value it produces.
pub fn eval<T, F>(f: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: for<'t> FnOnce(&'t Tape<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = f(&tape)?;
    let value = out.value().clone();
    Ok(value)
}

macro_rules! binary {
    ($name:ident, $variant:ident, $kernel:ident) => {
        pub fn $name(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
            let value = {
                let nodes = self.tape.nodes.borrow();
                nodes[self.id].value.$kernel(&nodes[other.id].value)?
            };
            Ok(self
                .tape
                .record(Op::$variant(self.id, other.id), value, &[self.id, other.id]))
        }
    };
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Var<'t, T>> {
        let value = f(&self.value())?;
        Ok(self.tape.record(op, value, &[self.id]))
    }

    binary!(add, Add, add);
    binary!(sub, Sub, sub);
    binary!(mul, Mul, mul);
    binary!(div, Div, div);
    binary!(matmul, MatMul, matmul);

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(Op::Scale(self.id, s), |x| Ok(x.scale(s))).unwrap()
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(Op::AddScalar(self.id), |x| Ok(x.map(|v| v + s))).unwrap()
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |x| Ok(x.map(T::exp))).unwrap()
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(Op::Ln(self.id), |x| Ok(x.map(T::ln))).unwrap()
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Op::Sqrt(self.id), |x| Ok(x.map(T::sqrt))).unwrap()
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| Ok(x.map(|v| v.max(T::zero()))))
            .unwrap()
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).unwrap()
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        self.unary(Op::SumAxis(self.id), |x| x.sum_axis(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("mean_axis: bad axis {axis}")))?;
        if n == 0 {
            return Err(Error::EmptyInput("mean over empty axis"));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        self.unary(Op::SumAll(self.id), |x| Ok(Tensor::scalar(x.sum_all())))
            .unwrap()
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Guarded Euclidean norm over the last axis (axis kept with extent 1).
    pub fn norm_last(self, delta: f64) -> Result<Var<'t, T>> {
        let d = T::of(delta);
        self.unary(Op::NormLast(self.id), |x| x.norm_last(d))
    }

    pub fn softmax_last(self) -> Result<Var<'t, T>> {
        self.unary(Op::Softmax(self.id), |x| x.softmax_last())
    }

    pub fn log_softmax_last(self) -> Result<Var<'t, T>> {
        self.unary(Op::LogSoftmax(self.id), |x| x.log_softmax_last())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        self.unary(Op::Reshape(self.id), |x| x.reshape(shape))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.unary(Op::Permute(self.id, axes.to_vec()), |x| x.permute(axes))
    }

    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::Shape(format!("transpose of rank-{r} tensor")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        self.unary(Op::Narrow(self.id, axis, start), |x| x.narrow(axis, start, len))
    }
}
