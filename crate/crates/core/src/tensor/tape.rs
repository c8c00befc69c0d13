//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are assigned in
//! creation order, so the tape is always topologically sorted. Gradients are
//! themselves built from tape operations, which means a gradient computed
//! with `create_graph = true` can be differentiated again. That is what the
//! bi-level meta-learner relies on to push the outer gradient through the
//! inner parameter update.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::value::{self, broadcast_shape, Tensor};
use crate::error::{config_err, usage_err, Error, Result};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    BroadcastTo(usize),
    SumTo(usize),
    Reshape(usize),
    Concat(Rc<[usize]>, usize),
    Slice { src: usize, axis: usize, start: usize },
    Pad { src: usize, axis: usize, start: usize },
    Gather(usize, Rc<[usize]>),
    ScatterAdd(usize, Rc<[usize]>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of a differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert!(
            value.is_finite() || !matches!(op, Op::Leaf),
            "non-finite leaf value"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, operands: &[usize]) -> Var<'_> {
        let rg = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            operands.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn handle(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are tape nodes that can be
    /// differentiated again; otherwise they are constants. Inputs the loss
    /// does not depend on receive `None`.
    pub fn gradients<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        debug_assert!(std::ptr::eq(loss.tape, self));
        if loss.numel() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        let previous = self.grad_enabled.replace(create_graph);
        let result = self.run_backward(loss, wrt);
        self.grad_enabled.set(previous);
        result
    }

    fn run_backward<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Option<Var<'t>>>> {
        let n = loss.id + 1;
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if !self.nodes.borrow()[loss.id].requires_grad {
            return Ok(vec![None; wrt.len()]);
        }
        grads[loss.id] = Some(self.constant(Tensor::ones(&loss.shape())));
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            for (operand, contrib) in self.vjp(id, &op, g)? {
                if !self.nodes.borrow()[operand].requires_grad {
                    continue;
                }
                grads[operand] = Some(match grads[operand] {
                    Some(prev) => prev.add(contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| grads.get(w.id).copied().flatten())
            .collect())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp<'t>(&'t self, id: usize, op: &Op, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        let out = self.handle(id);
        let h = |i: usize| self.handle(i);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.neg())],
            Op::Mul(a, b) => vec![(a, g.mul(h(b))?), (b, g.mul(h(a))?)],
            Op::Div(a, b) => vec![
                (a, g.div(h(b))?),
                (b, g.mul(out)?.div(h(b))?.neg()),
            ],
            Op::Neg(a) => vec![(a, g.neg())],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddConst(a) => vec![(a, g)],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(h(b).t()?)?),
                (b, h(a).t()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.t()?)],
            Op::Sigmoid(a) => {
                let slope = out.mul(out.neg().add_scalar(1.0))?;
                vec![(a, g.mul(slope)?)]
            }
            Op::Relu(a) => {
                let mask = self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g.mul(self.constant(mask))?)]
            }
            Op::Log(a) => vec![(a, g.div(h(a))?)],
            Op::Exp(a) => vec![(a, g.mul(out)?)],
            Op::Square(a) => vec![(a, g.mul(h(a))?.scale(2.0))],
            Op::Sqrt(a) => vec![(a, g.div(out)?.scale(0.5))],
            Op::Clamp(a, lo, hi) => {
                let mask = self
                    .value_of(a)
                    .map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
                vec![(a, g.mul(self.constant(mask))?)]
            }
            Op::BroadcastTo(a) => vec![(a, g.sum_to(&h(a).shape())?)],
            Op::SumTo(a) => vec![(a, g.broadcast_to(&h(a).shape())?)],
            Op::Reshape(a) => vec![(a, g.reshape(&h(a).shape())?)],
            Op::Concat(ref parts, axis) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts.iter() {
                    let len = h(p).shape()[axis];
                    res.push((p, g.slice(axis, offset, len)?));
                    offset += len;
                }
                res
            }
            Op::Slice { src, axis, start } => {
                let total = h(src).shape()[axis];
                vec![(src, g.pad(axis, start, total)?)]
            }
            Op::Pad { src, axis, start } => {
                let len = h(src).shape()[axis];
                vec![(src, g.slice(axis, start, len)?)]
            }
            Op::Gather(src, ref idx) => {
                let n = h(src).shape()[0];
                vec![(src, g.scatter_add_rows(Rc::clone(idx), n)?)]
            }
            Op::ScatterAdd(src, ref idx) => vec![(src, g.gather_rows(Rc::clone(idx))?)],
        })
    }
}

fn check_index(idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(i) => Err(config_err!("row index {i} out of bounds for {bound} rows")),
        None => Ok(()),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Borrow of the underlying value; do not hold across new tape ops.
    pub fn borrow_value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &*n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.borrow_value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.borrow_value().numel()
    }

    pub fn item(&self) -> f64 {
        self.borrow_value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.borrow_value().map(f);
        self.tape.record(v, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (a, b) = if sa == sb {
            (self, other)
        } else {
            let s = broadcast_shape(&sa, &sb)
                .ok_or_else(|| config_err!("cannot broadcast {sa:?} with {sb:?}"))?;
            (self.broadcast_to(&s)?, other.broadcast_to(&s)?)
        };
        let v = a.borrow_value().zip_map(&b.borrow_value(), f);
        Ok(self.tape.record(v, make(a.id, b.id), &[a.id, b.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |x| x + c)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(config_err!("matmul shape mismatch {sa:?} x {sb:?}"));
        }
        let v = value::matmul(&self.borrow_value(), &other.borrow_value());
        Ok(self.tape.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Matrix transpose.
    pub fn t(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(config_err!("transpose needs a matrix, got {:?}", self.shape()));
        }
        let v = value::transpose(&self.borrow_value());
        Ok(self.tape.record(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(x) = self.borrow_value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(x) = self.borrow_value().data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("sqrt of non-positive value {x}")));
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        if broadcast_shape(&s, shape).as_deref() != Some(shape) {
            return Err(config_err!("cannot broadcast {s:?} to {shape:?}"));
        }
        let v = value::broadcast_to(&self.borrow_value(), shape);
        Ok(self.tape.record(v, Op::BroadcastTo(self.id), &[self.id]))
    }

    /// Sums over the dimensions that `shape` would broadcast along.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        if broadcast_shape(shape, &s).as_deref() != Some(&s[..]) {
            return Err(config_err!("cannot reduce {s:?} to {shape:?}"));
        }
        let v = value::sum_to(&self.borrow_value(), shape);
        Ok(self.tape.record(v, Op::SumTo(self.id), &[self.id]))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(self) -> Var<'t> {
        self.sum_to(&[]).expect("reduction to scalar always valid")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Column sums of a matrix, shape `[1, d]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(config_err!("sum_rows needs a matrix, got {s:?}"));
        }
        self.sum_to(&[1, s[1]])
    }

    /// Mean-over-rows pooling of a matrix, shape `[1, d]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let n = self.shape().first().copied().unwrap_or(1) as f64;
        Ok(self.sum_rows()?.scale(1.0 / n))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(config_err!("cannot reshape {s:?} to {shape:?}"));
        }
        let v = Tensor::from_parts(shape.to_vec(), self.borrow_value().data().to_vec());
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat of zero tensors"))?;
        let tape = first.tape;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(config_err!("concat axis {axis} out of range for {s0:?}"));
        }
        for p in &parts[1..] {
            let s = p.shape();
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(config_err!("concat shape mismatch {s0:?} vs {s:?}"));
            }
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| &**v).collect();
        let v = value::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::Concat(ids.clone().into(), axis), &ids))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(config_err!(
                "slice [{start}, {}) on axis {axis} out of range for {s:?}",
                start + len
            ));
        }
        if len == s[axis] {
            return Ok(self);
        }
        let v = value::slice(&self.borrow_value(), axis, start, len);
        Ok(self.tape.record(v, Op::Slice { src: self.id, axis, start }, &[self.id]))
    }

    /// Zero-pads along `axis` so that this tensor sits at `start` of a
    /// dimension of size `total`. Adjoint of [`Var::slice`].
    pub fn pad(self, axis: usize, start: usize, total: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || start + s[axis] > total {
            return Err(config_err!("pad out of range for {s:?} into {total}"));
        }
        if s[axis] == total {
            return Ok(self);
        }
        let v = value::pad(&self.borrow_value(), axis, start, total);
        Ok(self.tape.record(v, Op::Pad { src: self.id, axis, start }, &[self.id]))
    }

    /// Row `i` of the output is row `idx[i]` of the input.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || idx.is_empty() {
            return Err(config_err!("gather_rows on shape {s:?} with {} indices", idx.len()));
        }
        check_index(&idx, s[0])?;
        let v = value::gather_rows(&self.borrow_value(), &idx);
        Ok(self.tape.record(v, Op::Gather(self.id, idx), &[self.id]))
    }

    /// Row `i` of the input is added into row `idx[i]` of an `n_out`-row
    /// zero tensor. Adjoint of [`Var::gather_rows`].
    pub fn scatter_add_rows(self, idx: Rc<[usize]>, n_out: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() || s[0] != idx.len() || n_out == 0 {
            return Err(config_err!(
                "scatter_add_rows: {} indices for shape {s:?}",
                idx.len()
            ));
        }
        check_index(&idx, n_out)?;
        let v = value::scatter_add_rows(&self.borrow_value(), &idx, n_out);
        Ok(self.tape.record(v, Op::ScatterAdd(self.id, idx), &[self.id]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
