//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes
//! are addressed by [`Var`] handles and never mutated after creation, so the
//! graph is acyclic by construction. [`Tape::backward`] walks the record in
//! reverse and accumulates exact vector-Jacobian products.

use std::collections::BTreeMap;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Axis-aware primitives act on the last axis.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// Elementwise; the right operand may also be a single row broadcast over
    /// every row of the left operand.
    Add,
    Sub,
    Mul,
    MatMul,
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
    /// Row lookup into a `[rows, cols]` table.
    Gather {
        indices: Vec<usize>,
    },
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Neg,
    Scale(f64),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "embed-gather",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log-softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Neg => "negate",
            Op::Scale(_) => "scalar-scale",
            Op::StopGradient => "stop-gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    trainable: bool,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
    stop_grad: bool,
    param: Option<Param>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to the named trainable parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Every trainable parameter that received a gradient.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Gradient with respect to an arbitrary node, `None` when no gradient
    /// reached it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.node_grads.get(var.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, vec![], false, false, None)
    }

    /// Named parameter leaf. Frozen leaves (`trainable == false`) behave as
    /// constants during backward and never appear in the gradient map.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        let param = Param {
            name: name.to_string(),
            trainable,
        };
        self.push(value, Op::Leaf, vec![], trainable, false, Some(param))
    }

    /// Whether gradients can flow into this node.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_stop_grad(&self, v: Var) -> bool {
        self.nodes[v.0].stop_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        parents: Vec<Var>,
        requires_grad: bool,
        stop_grad: bool,
        param: Option<Param>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
            stop_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies a primitive to `inputs` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&op, inputs)?;
        let stop = matches!(op, Op::StopGradient);
        let requires_grad = !stop && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad, stop, None))
    }

    fn arity(&self, op: &Op, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(crate::error::invalid(format!(
                "{} expects {n} input(s), got {}",
                op.name(),
                inputs.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match op {
            Op::Leaf => Err(crate::error::invalid(
                "leaf nodes are created with constant/param",
            )),
            Op::Add | Op::Sub | Op::Mul => {
                self.arity(op, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                if a.shape() == b.shape() {
                    Ok(a.zip(b, f))
                } else if !matches!(op, Op::Mul) && is_row_broadcast(a, b) {
                    let c = a.cols();
                    let data = a
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data()[i % c]))
                        .collect();
                    Tensor::new(a.shape().to_vec(), data)
                } else {
                    Err(shape_err(op, a, b))
                }
            }
            Op::MatMul => {
                self.arity(op, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(op, a, b));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], tensor::matmul(a.data(), b.data(), m, k, n))
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(crate::error::invalid("concat needs at least one input"));
                }
                let rows = val(0).rows();
                let lead = val(0).shape()[..val(0).shape().len() - 1].to_vec();
                for i in 1..inputs.len() {
                    if val(i).shape()[..val(i).shape().len() - 1] != lead[..] {
                        return Err(shape_err(op, val(0), val(i)));
                    }
                }
                let total: usize = (0..inputs.len()).map(|i| val(i).cols()).sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for i in 0..inputs.len() {
                        data.extend_from_slice(val(i).row_slice(r));
                    }
                }
                let mut shape = lead;
                shape.push(total);
                Tensor::new(shape, data)
            }
            Op::Slice { start, len } => {
                self.arity(op, inputs, 1)?;
                let a = val(0);
                if *len == 0 || start + len > a.cols() {
                    return Err(Error::Shape {
                        op: "slice",
                        lhs: a.shape().to_vec(),
                        rhs: vec![*start, *len],
                    });
                }
                let mut data = Vec::with_capacity(a.rows() * len);
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(r)[*start..start + len]);
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Tensor::new(shape, data)
            }
            Op::Gather { indices } => {
                self.arity(op, inputs, 1)?;
                let table = val(0);
                if table.shape().len() != 2 || indices.is_empty() {
                    return Err(Error::Shape {
                        op: "embed-gather",
                        lhs: table.shape().to_vec(),
                        rhs: vec![indices.len()],
                    });
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= table.rows()) {
                    return Err(Error::TokenOutOfRange {
                        id: bad,
                        vocab: table.rows(),
                    });
                }
                let mut data = Vec::with_capacity(indices.len() * table.cols());
                for &i in indices {
                    data.extend_from_slice(table.row_slice(i));
                }
                Tensor::new(vec![indices.len(), table.cols()], data)
            }
            Op::Relu => self.unary(op, inputs, |x| x.max(0.0)),
            Op::Sigmoid => self.unary(op, inputs, sigmoid),
            Op::Tanh => self.unary(op, inputs, f64::tanh),
            Op::Neg => self.unary(op, inputs, |x| -x),
            Op::Scale(s) => {
                let s = *s;
                self.unary(op, inputs, move |x| x * s)
            }
            Op::StopGradient => self.unary(op, inputs, |x| x),
            Op::LogSoftmax | Op::Softmax => {
                self.arity(op, inputs, 1)?;
                let a = val(0);
                let mut data = Vec::with_capacity(a.numel());
                for r in 0..a.rows() {
                    data.extend(tensor::log_softmax_row(a.row_slice(r)));
                }
                if matches!(op, Op::Softmax) {
                    data.iter_mut().for_each(|v| *v = v.exp());
                }
                Tensor::new(a.shape().to_vec(), data)
            }
            Op::Sum | Op::Mean => {
                self.arity(op, inputs, 1)?;
                let a = val(0);
                let s: f64 = a.data().iter().sum();
                let v = if matches!(op, Op::Mean) {
                    s / a.numel() as f64
                } else {
                    s
                };
                Ok(Tensor::scalar(v))
            }
        }
    }

    fn unary(&self, op: &Op, inputs: &[Var], f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.arity(op, inputs, 1)?;
        Ok(self.nodes[inputs[0].0].value.map(f))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (parent, pg) in self.vjp(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(p), Some(g)) = (&node.param, &grads[idx]) {
                if p.trainable {
                    match params.get_mut(&p.name) {
                        Some(acc) => Tensor::add_assign(acc, g),
                        None => {
                            params.insert(p.name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let p = &node.parents;
        let val = |i: usize| &self.nodes[p[i].0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Add) {
                    1.0
                } else {
                    -1.0
                };
                let b = val(1);
                let gb = if b.shape() == g.shape() {
                    g.map(|v| sign * v)
                } else {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (a, &v) in acc.iter_mut().zip(g.row_slice(r)) {
                            *a += sign * v;
                        }
                    }
                    Tensor::new(b.shape().to_vec(), acc).expect("broadcast row")
                };
                vec![(p[0], g.clone()), (p[1], gb)]
            }
            Op::Mul => vec![
                (p[0], g.zip(val(1), |a, b| a * b)),
                (p[1], g.zip(val(0), |a, b| a * b)),
            ],
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = tensor::matmul_bt(g.data(), b.data(), m, n, k);
                let gb = tensor::matmul_at(a.data(), g.data(), m, k, n);
                vec![
                    (p[0], Tensor::new(vec![m, k], ga).expect("matmul grad")),
                    (p[1], Tensor::new(vec![k, n], gb).expect("matmul grad")),
                ]
            }
            Op::Concat => {
                let mut offset = 0;
                let total = g.cols();
                p.iter()
                    .enumerate()
                    .map(|(i, &parent)| {
                        let c = val(i).cols();
                        let mut data = Vec::with_capacity(val(i).numel());
                        for r in 0..g.rows() {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        offset += c;
                        (
                            parent,
                            Tensor::new(val(i).shape().to_vec(), data).expect("concat grad"),
                        )
                    })
                    .collect()
            }
            Op::Slice { start, len } => {
                let a = val(0);
                let mut out = Tensor::zeros(a.shape());
                let c = a.cols();
                for r in 0..a.rows() {
                    out.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(g.row_slice(r));
                }
                vec![(p[0], out)]
            }
            Op::Gather { indices } => {
                let table = val(0);
                let c = table.cols();
                let mut out = Tensor::zeros(table.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in out.data_mut()[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(g.row_slice(r))
                    {
                        *o += v;
                    }
                }
                vec![(p[0], out)]
            }
            Op::Relu => vec![(p[0], g.zip(val(0), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid => vec![(p[0], g.zip(y, |gv, s| gv * s * (1.0 - s)))],
            Op::Tanh => vec![(p[0], g.zip(y, |gv, t| gv * (1.0 - t * t)))],
            Op::Neg => vec![(p[0], g.map(|v| -v))],
            Op::Scale(s) => {
                let s = *s;
                vec![(p[0], g.map(move |v| v * s))]
            }
            Op::Softmax => {
                let c = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                debug_assert_eq!(data.len(), y.rows() * c);
                vec![(
                    p[0],
                    Tensor::new(y.shape().to_vec(), data).expect("softmax grad"),
                )]
            }
            Op::LogSoftmax => {
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let gsum: f64 = gr.iter().sum();
                    data.extend(yr.iter().zip(gr).map(|(&ly, &gv)| gv - ly.exp() * gsum));
                }
                vec![(
                    p[0],
                    Tensor::new(y.shape().to_vec(), data).expect("log-softmax grad"),
                )]
            }
            Op::Sum => {
                let gv = g.item();
                vec![(p[0], Tensor::filled(val(0).shape(), gv))]
            }
            Op::Mean => {
                let a = val(0);
                let gv = g.item() / a.numel() as f64;
                vec![(p[0], Tensor::filled(a.shape(), gv))]
            }
        }
    }

    // Convenience wrappers. Each records exactly one primitive.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { indices }, &[table])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    /// Identity forward; contributes no gradient to `a`'s ancestors.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        self.apply(Op::StopGradient, &[a])
            .expect("stop-gradient is unary and shape-preserving")
    }

    /// `log(exp(a) + exp(b))` for two single-element nodes, built from
    /// concat and log-softmax so it stays within the primitive set.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let both = self.concat(&[a, b])?;
        let ls = self.log_softmax(both)?;
        let first = self.slice(ls, 0, 1)?;
        self.sub(a, first)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    b.rows() == 1 && b.cols() == a.cols() && b.shape().len() <= a.shape().len()
}

fn shape_err(op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}
