//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] owns a tape of recorded operations. Every [`Var`] is a handle
//! into that tape; operations on vars append nodes, and [`Graph::backward`]
//! walks the tape in reverse accumulating adjoints. Parents always precede
//! their children on the tape, so reverse insertion order is a valid
//! reverse-topological order.
//!
//! A graph is single-threaded and short-lived: build one per forward pass,
//! take the gradients, drop it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, normalize_axis, MatmulKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Elu,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Ln,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    MatMul(usize, usize, MatmulKind),
    Transpose(usize, usize, usize),
    Reshape(usize),
    BroadcastTo(usize),
    Unary(usize, Unary),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    Max(usize, usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    IndexSelect(usize, usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor)>>,
    training: bool,
}

/// A tape plus read access to the parameters it may bind.
pub struct Graph<'s> {
    store: &'s ParamStore,
    tape: Tape,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    /// A graph in training mode (batch statistics in normalization layers).
    pub fn training(store: &'s ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    pub fn with_mode(store: &'s ParamStore, training: bool) -> Self {
        Graph {
            store,
            tape: Tape {
                nodes: RefCell::new(Vec::new()),
                bound: RefCell::new(HashMap::new()),
                buffer_updates: RefCell::new(Vec::new()),
                training,
            },
        }
    }

    pub fn is_training(&self) -> bool {
        self.tape.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// A value that does not receive a gradient.
    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.tape.leaf(t, false, "constant")
    }

    /// A value whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, t: Tensor) -> Result<Var<'_>> {
        self.tape.leaf(t, true, "input")
    }

    pub fn scalar(&self, v: f64) -> Result<Var<'_>> {
        self.constant(Tensor::scalar(v))
    }

    /// Binds a stored parameter onto the tape (once per graph).
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.tape.bound.borrow().get(&id) {
            return Var { tape: &self.tape, id: node };
        }
        let entry = self.store.entry(id);
        let var = self.tape.push(Rc::new(entry.value.clone()), Op::Leaf, entry.trainable);
        self.tape.bound.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        self.tape.concat(parts, axis)
    }

    pub fn stack<'t>(&'t self, parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack of zero vars"))?;
        let rank = first.shape().len() + 1;
        let ax = normalize_axis("stack", axis, rank)?;
        let lifted = parts.iter().map(|p| p.unsqueeze(ax)).collect::<Result<Vec<_>>>()?;
        self.tape.concat(&lifted, ax as isize)
    }

    /// Queues a new value for a non-trainable buffer; applied by the trainer.
    pub fn update_buffer(&self, id: ParamId, value: Tensor) {
        self.tape.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.tape.buffer_updates.borrow_mut())
    }

    pub fn num_nodes(&self) -> usize {
        self.tape.nodes.borrow().len()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, &self.tape) {
            return Err(Error::invalid("loss belongs to another graph"));
        }
        let nodes = self.tape.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let bound = self.tape.bound.borrow();
        let params = self
            .store
            .ids()
            .map(|pid| {
                bound
                    .get(&pid)
                    .and_then(|&n| grads[n].clone())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(pid).shape()))
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let y = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, tensor::sum_to_shape(g, val(*a).shape()));
            acc(grads, nodes, *b, tensor::sum_to_shape(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, tensor::sum_to_shape(g, val(*a).shape()));
            acc(grads, nodes, *b, tensor::sum_to_shape(&g.map(|v| -v), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = tensor::binary("mul", g, val(*b), |x, y| x * y).expect("broadcast checked in forward");
                acc(grads, nodes, *a, tensor::sum_to_shape(&ga, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                let gb = tensor::binary("mul", g, val(*a), |x, y| x * y).expect("broadcast checked in forward");
                acc(grads, nodes, *b, tensor::sum_to_shape(&gb, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if nodes[*a].requires_grad {
                let ga = tensor::binary("div", g, val(*b), |x, y| x / y).expect("broadcast checked in forward");
                acc(grads, nodes, *a, tensor::sum_to_shape(&ga, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -y / b
                let t = tensor::binary("div", g, val(*b), |x, y| x / y).expect("broadcast checked in forward");
                let gb = tensor::binary("div", &t, y, |x, y| -x * y).expect("same shape");
                acc(grads, nodes, *b, tensor::sum_to_shape(&gb, val(*b).shape()));
            }
        }
        Op::Scale(a, s) => acc(grads, nodes, *a, g.map(|v| v * s)),
        Op::AddScalar(a) => acc(grads, nodes, *a, g.clone()),
        Op::Powf(a, p) => {
            let x = val(*a);
            let data = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * p * xv.powf(p - 1.0)).collect();
            acc(grads, nodes, *a, Tensor::raw(x.shape().to_vec(), data));
        }
        Op::MatMul(a, b, kind) => {
            let (ga, gb) = tensor::matmul_backward(val(*a), val(*b), g, *kind);
            acc(grads, nodes, *a, ga);
            acc(grads, nodes, *b, gb);
        }
        Op::Transpose(a, i, j) => acc(grads, nodes, *a, tensor::transpose(g, *i, *j)),
        Op::Reshape(a) => {
            acc(grads, nodes, *a, Tensor::raw(val(*a).shape().to_vec(), g.data().to_vec()));
        }
        Op::BroadcastTo(a) => acc(grads, nodes, *a, tensor::sum_to_shape(g, val(*a).shape())),
        Op::Unary(a, kind) => {
            let x = val(*a);
            let d: Vec<f64> = match kind {
                Unary::Elu => g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| if *yv > 0.0 { *gv } else { gv * (yv + 1.0) })
                    .collect(),
                Unary::Tanh => g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                Unary::Sigmoid => g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                Unary::Relu => {
                    g.data().iter().zip(x.data()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()
                }
                Unary::Exp => g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv).collect(),
                Unary::Ln => g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect(),
            };
            acc(grads, nodes, *a, Tensor::raw(x.shape().to_vec(), d));
        }
        Op::Softmax(a, axis) => {
            // dx = y * (g - sum(g*y))
            let gy = tensor::binary("softmax", g, y, |p, q| p * q).expect("same shape");
            let s = tensor::sum_axis(&gy, *axis);
            let s = tensor::expand_axis(&s, y.shape(), *axis, 1.0);
            let data = y.data().iter().zip(g.data()).zip(s.data()).map(|((yv, gv), sv)| yv * (gv - sv)).collect();
            acc(grads, nodes, *a, Tensor::raw(y.shape().to_vec(), data));
        }
        Op::LogSoftmax(a, axis) => {
            // dx = g - softmax * sum(g)
            let s = tensor::sum_axis(g, *axis);
            let s = tensor::expand_axis(&s, y.shape(), *axis, 1.0);
            let data = y.data().iter().zip(g.data()).zip(s.data()).map(|((yv, gv), sv)| gv - yv.exp() * sv).collect();
            acc(grads, nodes, *a, Tensor::raw(y.shape().to_vec(), data));
        }
        Op::Sum(a, axis) => acc(grads, nodes, *a, tensor::expand_axis(g, val(*a).shape(), *axis, 1.0)),
        Op::Mean(a, axis) => {
            let shape = val(*a).shape();
            let n = shape[*axis] as f64;
            acc(grads, nodes, *a, tensor::expand_axis(g, shape, *axis, 1.0 / n));
        }
        Op::Max(a, axis, arg) => {
            let shape = val(*a).shape();
            let (outer, len, inner) = tensor::axis_split(shape, *axis);
            let mut data = vec![0.0; tensor::numel(shape)];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    data[(o * len + arg[slot]) * inner + i] = g.data()[slot];
                }
            }
            acc(grads, nodes, *a, Tensor::raw(shape.to_vec(), data));
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if nodes[p].requires_grad {
                    acc(grads, nodes, p, tensor::narrow(g, *axis, start, len).expect("concat extents"));
                }
                start += len;
            }
        }
        Op::Narrow(a, axis, start) => acc(grads, nodes, *a, tensor::pad_axis(g, val(*a).shape(), *axis, *start)),
        Op::IndexSelect(a, axis, idx) => {
            acc(grads, nodes, *a, tensor::index_scatter_add(g, val(*a).shape(), *axis, idx))
        }
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to a var recorded on the tape, if it was reached.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a stored parameter (zeros when the loss does not depend on it).
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }
}

impl Tape {
    fn push(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn leaf(&self, t: Tensor, requires_grad: bool, op: &'static str) -> Result<Var<'_>> {
        if !t.is_finite() {
            return Err(Error::NumericDomain { op });
        }
        Ok(self.push(Rc::new(t), Op::Leaf, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NumericDomain { op: name });
        }
        let rg = self.needs(parents);
        Ok(self.push(Rc::new(value), op, rg))
    }

    fn concat<'t>(&'t self, parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero vars"))?;
        if parts.iter().any(|p| !std::ptr::eq(p.tape, self)) {
            return Err(Error::invalid("concat across graphs"));
        }
        let ax = normalize_axis("concat", axis, first.shape().len())?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat(&refs, ax)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat", out, Op::Concat(ids.clone(), ax), &ids)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: isize) -> usize {
        let s = self.shape();
        let a = if axis < 0 { s.len() as isize + axis } else { axis } as usize;
        s[a]
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("vars from different graphs"))
        }
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = tensor::binary(name, &self.value(), &other.value(), f)?;
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * s);
        self.tape.record("scale", out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + s);
        self.tape.record("add_scalar", out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.powf(p));
        self.tape.record("powf", out, Op::Powf(self.id, p), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (kind, _) = tensor::matmul_kind(a.shape(), b.shape())?;
        let out = tensor::matmul(&a, &b)?;
        self.tape.record("matmul", out, Op::MatMul(self.id, other.id, kind), &[self.id, other.id])
    }

    /// `self · w + b` over the last axis.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn transpose(self, i: isize, j: isize) -> Result<Var<'t>> {
        let r = self.shape().len();
        let (i, j) = (normalize_axis("transpose", i, r)?, normalize_axis("transpose", j, r)?);
        let out = tensor::transpose(&self.value(), i, j);
        self.tape.record("transpose", out, Op::Transpose(self.id, i, j), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn unsqueeze(self, axis: usize) -> Result<Var<'t>> {
        let mut s = self.shape();
        if axis > s.len() {
            return Err(Error::shape("unsqueeze", format!("axis {axis} beyond rank {}", s.len())));
        }
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn squeeze(self, axis: usize) -> Result<Var<'t>> {
        let mut s = self.shape();
        if s.get(axis) != Some(&1) {
            return Err(Error::shape("squeeze", format!("axis {axis} of {s:?} is not 1")));
        }
        s.remove(axis);
        self.reshape(&s)
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(self);
        }
        let out = tensor::broadcast_to(&self.value(), shape)?;
        self.tape.record("broadcast_to", out, Op::BroadcastTo(self.id), &[self.id])
    }

    fn unary(self, name: &'static str, kind: Unary, f: fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.record(name, out, Op::Unary(self.id, kind), &[self.id])
    }

    /// ELU with alpha = 1.
    pub fn elu(self) -> Result<Var<'t>> {
        self.unary("elu", Unary::Elu, tensor::elu)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", Unary::Tanh, f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Unary::Sigmoid, tensor::sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Unary::Relu, |x| x.max(0.0))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Unary::Exp, f64::exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NumericDomain { op: "ln" });
        }
        self.unary("ln", Unary::Ln, f64::ln)
    }

    pub fn softmax(self, axis: isize) -> Result<Var<'t>> {
        let ax = normalize_axis("softmax", axis, self.shape().len())?;
        let out = tensor::softmax(&self.value(), ax);
        self.tape.record("softmax", out, Op::Softmax(self.id, ax), &[self.id])
    }

    pub fn log_softmax(self, axis: isize) -> Result<Var<'t>> {
        let ax = normalize_axis("log_softmax", axis, self.shape().len())?;
        let out = tensor::log_softmax(&self.value(), ax);
        self.tape.record("log_softmax", out, Op::LogSoftmax(self.id, ax), &[self.id])
    }

    pub fn sum(self, axis: isize) -> Result<Var<'t>> {
        let ax = normalize_axis("sum", axis, self.shape().len())?;
        let out = tensor::sum_axis(&self.value(), ax);
        self.tape.record("sum", out, Op::Sum(self.id, ax), &[self.id])
    }

    pub fn mean(self, axis: isize) -> Result<Var<'t>> {
        let ax = normalize_axis("mean", axis, self.shape().len())?;
        let v = self.value();
        let n = v.shape()[ax] as f64;
        let out = tensor::sum_axis(&v, ax).map(|x| x / n);
        self.tape.record("mean", out, Op::Mean(self.id, ax), &[self.id])
    }

    pub fn max(self, axis: isize) -> Result<Var<'t>> {
        let ax = normalize_axis("max", axis, self.shape().len())?;
        let (out, arg) = tensor::max_axis(&self.value(), ax);
        self.tape.record("max", out, Op::Max(self.id, ax, arg), &[self.id])
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum(0)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.mean(0)
    }

    pub fn narrow(self, axis: isize, start: usize, len: usize) -> Result<Var<'t>> {
        let ax = normalize_axis("narrow", axis, self.shape().len())?;
        let out = tensor::narrow(&self.value(), ax, start, len)?;
        self.tape.record("narrow", out, Op::Narrow(self.id, ax, start), &[self.id])
    }

    /// Picks slot `i` along `axis`, dropping that axis.
    pub fn select(self, axis: isize, i: usize) -> Result<Var<'t>> {
        let ax = normalize_axis("select", axis, self.shape().len())?;
        self.narrow(ax as isize, i, 1)?.squeeze(ax)
    }

    pub fn index_select(self, axis: isize, idx: &[usize]) -> Result<Var<'t>> {
        let ax = normalize_axis("index_select", axis, self.shape().len())?;
        let out = tensor::index_select(&self.value(), ax, idx)?;
        self.tape.record("index_select", out, Op::IndexSelect(self.id, ax, idx.to_vec()), &[self.id])
    }

    /// Splits into consecutive chunks along `axis`.
    pub fn split(self, axis: isize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        if start != self.dim(axis) {
            return Err(Error::shape("split", format!("sizes {sizes:?} do not cover axis of {:?}", self.shape())));
        }
        Ok(out)
    }

    pub fn concat_with(self, other: Var<'t>, axis: isize) -> Result<Var<'t>> {
        self.tape.concat(&[self, other], axis)
    }
}

/// The primitive families exposed for direct evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    MulElementwise,
    ConcatLastDim,
    SoftmaxLastDim,
    Elu,
    Tanh,
    Sigmoid,
    MeanAxis(isize),
    MaxAxis(isize),
    /// inputs: x, w, b
    Linear,
}

/// Applies one primitive to vars on a shared tape.
pub fn forward_primitive<'t>(kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let arity = match kind {
        OpKind::MatMul | OpKind::Add | OpKind::MulElementwise => 2,
        OpKind::Linear => 3,
        OpKind::ConcatLastDim => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::invalid(format!("{kind:?} takes {arity} inputs, got {}", inputs.len())));
    }
    let x = inputs[0];
    match kind {
        OpKind::MatMul => x.matmul(inputs[1]),
        OpKind::Add => x.add(inputs[1]),
        OpKind::MulElementwise => x.mul(inputs[1]),
        OpKind::ConcatLastDim => x.tape.concat(inputs, -1),
        OpKind::SoftmaxLastDim => x.softmax(-1),
        OpKind::Elu => x.elu(),
        OpKind::Tanh => x.tanh(),
        OpKind::Sigmoid => x.sigmoid(),
        OpKind::MeanAxis(a) => x.mean(a),
        OpKind::MaxAxis(a) => x.max(a),
        OpKind::Linear => x.linear(inputs[1], Some(inputs[2])),
    }
}

/// Evaluates a primitive on plain tensors without recording gradients.
pub fn eval_primitive(kind: OpKind, inputs: &[Tensor]) -> Result<Tensor> {
    let store = ParamStore::new();
    let g = Graph::new(&store);
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = forward_primitive(kind, &vars)?;
    let v = out.value();
    Ok(v.as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(Tensor::vector(&[1.0, -2.0, 3.0])).unwrap();
        let loss = x.sum_all().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_times_x_has_zero_gradient() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(Tensor::vector(&[1.0, 2.0])).unwrap();
        let loss = x.scale(0.0).unwrap().sum_all().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0));
        let g = Graph::new(&store);
        let x = g.scalar(1.0).unwrap();
        let loss = g.param(w).mul(x).unwrap().sigmoid().unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.param(w).item().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(Tensor::vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(&[2.0]));
        let unused = store.add("unused", Tensor::vector(&[5.0, 6.0]));
        let g = Graph::new(&store);
        let loss = g.param(used).sum_all().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(used).data(), &[1.0]);
        assert_eq!(grads.param(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        assert!(matches!(g.constant(Tensor::vector(&[f64::NAN])), Err(Error::NumericDomain { .. })));
        let big = g.constant(Tensor::vector(&[1000.0])).unwrap();
        assert!(matches!(big.exp(), Err(Error::NumericDomain { op: "exp" })));
    }

    #[test]
    fn primitive_examples() {
        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let ab = eval_primitive(OpKind::MatMul, &[a.clone(), b]).unwrap();
        assert_eq!(ab.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(eval_primitive(OpKind::MatMul, &[a.clone(), Tensor::eye(2)]).unwrap(), a);
        let s = eval_primitive(OpKind::SoftmaxLastDim, &[Tensor::vector(&[0.0, 0.0])]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let err = eval_primitive(OpKind::MatMul, &[a, Tensor::zeros(&[3, 1])]).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }
}
