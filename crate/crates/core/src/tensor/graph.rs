use std::cell::RefCell;
use std::fmt;

use super::kernels::{self, Padding};
use super::{numel, reduced_shape, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: f64 },
    Square,
    Sqrt,
    Abs,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu { slope: f64 },
    ClampMin { floor: f64 },
    SumTo,
    BroadcastTo,
    Reshape,
    Upsample { factor: usize },
    SumPool { factor: usize },
    Conv { padding: Padding },
    ConvInputGrad { padding: Padding },
    ConvWeightGrad { padding: Padding },
}

struct Node {
    op: Op,
    inputs: [usize; 2],
    arity: usize,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of operations. Node ids are a topological order:
/// every input id is smaller than the id of the node that consumes it.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: &[usize], value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = matches!(op, Op::Leaf) || inputs.iter().any(|&i| nodes[i].requires_grad);
        let mut ins = [usize::MAX; 2];
        ins[..inputs.len()].copy_from_slice(inputs);
        nodes.push(Node {
            op,
            inputs: ins,
            arity: inputs.len(),
            value,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or latent).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, &[], value)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Constant, &[], value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`, as
    /// graph nodes that can be differentiated again.
    ///
    /// Gradients accumulate over all paths in decreasing node-id order, so
    /// the result is deterministic for a fixed construction order. Nodes of
    /// `wrt` that `output` does not depend on get a zero constant.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        ensure!(
            numel(&out_shape) == 1,
            "backward needs a scalar loss, got shape {:?}",
            out_shape
        );
        let n = output.id + 1;
        let mut relevant = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id < n && nodes[w.id].requires_grad {
                    relevant[w.id] = true;
                }
            }
            for i in 0..n {
                let node = &nodes[i];
                if !relevant[i] && node.requires_grad {
                    relevant[i] = node.inputs[..node.arity].iter().any(|&j| relevant[j]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; n];
        if relevant[output.id] {
            adjoint[output.id] = Some(self.constant(Tensor::ones(&out_shape)));
        }
        for i in (0..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let (op, inputs, arity) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs, nodes[i].arity)
            };
            if arity == 0 {
                continue;
            }
            let need = [relevant[inputs[0]], arity > 1 && relevant[inputs[1]]];
            if !need[0] && !need[1] {
                continue;
            }
            let this = Var { graph: self, id: i };
            let ins = [
                Var { graph: self, id: inputs[0] },
                Var {
                    graph: self,
                    id: if arity > 1 { inputs[1] } else { inputs[0] },
                },
            ];
            let contrib = vjp(&op, &ins[..arity], this, g, need)?;
            for (slot, c) in contrib.into_iter().enumerate() {
                if let Some(c) = c {
                    let j = inputs[slot];
                    adjoint[j] = Some(match adjoint[j] {
                        None => c,
                        Some(prev) => prev.add(c)?,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adjoint
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(&w.shape())))
            })
            .collect())
    }

    /// Gradient values of a scalar loss.
    pub fn backward<'g>(&'g self, loss: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Tensor>> {
        Ok(self.grad(loss, wrt)?.iter().map(Var::value).collect())
    }

    /// `‖∂inner/∂wrt‖²` as a node that can itself be differentiated.
    pub fn grad_norm_sq<'g>(&'g self, inner: Var<'g>, wrt: Var<'g>) -> Result<Var<'g>> {
        let g = self.grad(inner, &[wrt])?[0];
        Ok(g.square().sum())
    }
}

fn vjp<'g>(
    op: &Op,
    ins: &[Var<'g>],
    out: Var<'g>,
    g: Var<'g>,
    need: [bool; 2],
) -> Result<[Option<Var<'g>>; 2]> {
    let a = ins[0];
    let first = |f: &dyn Fn() -> Result<Var<'g>>| -> Result<[Option<Var<'g>>; 2]> {
        Ok([Some(f()?), None])
    };
    match *op {
        Op::Leaf | Op::Constant => Ok([None, None]),
        Op::Add => {
            let b = ins[1];
            Ok([
                if need[0] { Some(g.sum_to(&a.shape())?) } else { None },
                if need[1] { Some(g.sum_to(&b.shape())?) } else { None },
            ])
        }
        Op::Sub => {
            let b = ins[1];
            Ok([
                if need[0] { Some(g.sum_to(&a.shape())?) } else { None },
                if need[1] { Some(g.neg().sum_to(&b.shape())?) } else { None },
            ])
        }
        Op::Mul => {
            let b = ins[1];
            Ok([
                if need[0] { Some(g.mul(b)?.sum_to(&a.shape())?) } else { None },
                if need[1] { Some(g.mul(a)?.sum_to(&b.shape())?) } else { None },
            ])
        }
        Op::Div => {
            let b = ins[1];
            Ok([
                if need[0] { Some(g.div(b)?.sum_to(&a.shape())?) } else { None },
                if need[1] {
                    Some(g.mul(out)?.div(b)?.neg().sum_to(&b.shape())?)
                } else {
                    None
                },
            ])
        }
        Op::Affine { scale, .. } => first(&|| Ok(g.affine(scale, 0.0))),
        Op::Square => first(&|| g.mul(a.affine(2.0, 0.0))),
        Op::Sqrt => first(&|| g.div(out.affine(2.0, 0.0))),
        Op::Abs => first(&|| g.mul_const(&a.value().map(|x| if x >= 0.0 { 1.0 } else { -1.0 }))),
        Op::Tanh => first(&|| g.mul(out.square().affine(-1.0, 1.0))),
        Op::Sigmoid => first(&|| g.mul(out.mul(out.affine(-1.0, 1.0))?)),
        Op::Softplus => first(&|| g.mul(a.sigmoid())),
        Op::LeakyRelu { slope } => {
            first(&|| g.mul_const(&a.value().map(|x| if x > 0.0 { 1.0 } else { slope })))
        }
        Op::ClampMin { floor } => {
            first(&|| g.mul_const(&a.value().map(|x| if x > floor { 1.0 } else { 0.0 })))
        }
        Op::SumTo => first(&|| g.broadcast_to(&a.shape())),
        Op::BroadcastTo => first(&|| g.sum_to(&a.shape())),
        Op::Reshape => first(&|| g.reshape(&a.shape())),
        Op::Upsample { factor } => first(&|| g.sum_pool(factor)),
        Op::SumPool { factor } => first(&|| g.upsample(factor)),
        Op::Conv { padding } => {
            let w = ins[1];
            let k = w.shape()[2];
            Ok([
                if need[0] { Some(conv_input_grad(g, w, padding)) } else { None },
                if need[1] { Some(conv_weight_grad(a, g, k, padding)) } else { None },
            ])
        }
        Op::ConvInputGrad { padding } => {
            let w = ins[1];
            let k = w.shape()[2];
            Ok([
                if need[0] { Some(g.conv2d(w, padding)?) } else { None },
                if need[1] { Some(conv_weight_grad(g, a, k, padding)) } else { None },
            ])
        }
        Op::ConvWeightGrad { padding } => {
            let q = ins[1];
            Ok([
                if need[0] { Some(conv_input_grad(q, g, padding)) } else { None },
                if need[1] { Some(a.conv2d(g, padding)?) } else { None },
            ])
        }
    }
}

fn conv_input_grad<'g>(q: Var<'g>, w: Var<'g>, padding: Padding) -> Var<'g> {
    let value = kernels::conv2d_input_grad(&q.value(), &w.value(), padding);
    q.graph.push(Op::ConvInputGrad { padding }, &[q.id, w.id], value)
}

fn conv_weight_grad<'g>(x: Var<'g>, q: Var<'g>, k: usize, padding: Padding) -> Var<'g> {
    let value = kernels::conv2d_weight_grad(&x.value(), &q.value(), k, padding);
    x.graph.push(Op::ConvWeightGrad { padding }, &[x.id, q.id], value)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().map(f);
        self.graph.push(op, &[self.id], value)
    }

    fn binary(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        let value = kernels::broadcast_binary(&self.value(), &other.value(), f)?;
        Ok(self.graph.push(op, &[self.id, other.id], value))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn mul_const(&self, t: &Tensor) -> Result<Var<'g>> {
        self.mul(self.graph.constant(t.clone()))
    }

    pub fn add_const(&self, t: &Tensor) -> Result<Var<'g>> {
        self.add(self.graph.constant(t.clone()))
    }

    /// `scale * x + bias` with constant scalars.
    pub fn affine(&self, scale: f64, bias: f64) -> Var<'g> {
        self.unary(Op::Affine { scale }, |x| scale * x + bias)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus, |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(Op::LeakyRelu { slope }, move |x| if x > 0.0 { x } else { slope * x })
    }

    /// `max(x, floor)`; clamped entries pass no gradient.
    pub fn clamp_min(&self, floor: f64) -> Var<'g> {
        self.unary(Op::ClampMin { floor }, move |x| x.max(floor))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(*self);
        }
        let value = kernels::sum_to(&v, shape)?;
        Ok(self.graph.push(Op::SumTo, &[self.id], value))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(*self);
        }
        let value = kernels::broadcast_to(&v, shape)?;
        Ok(self.graph.push(Op::BroadcastTo, &[self.id], value))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph.push(Op::Reshape, &[self.id], value))
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&self) -> Var<'g> {
        self.sum_to(&[]).expect("any shape reduces to a scalar")
    }

    pub fn mean(&self) -> Var<'g> {
        let n = numel(&self.shape()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<'g>> {
        let target = reduced_shape(&self.shape(), axes)?;
        self.sum_to(&target)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let target = reduced_shape(&shape, axes)?;
        let count = numel(&shape) / numel(&target).max(1);
        Ok(self.sum_to(&target)?.scale(1.0 / count as f64))
    }

    pub fn upsample(&self, factor: usize) -> Result<Var<'g>> {
        ensure!(self.shape().len() == 4 && factor >= 1, "upsample needs NCHW and factor >= 1");
        if factor == 1 {
            return Ok(*self);
        }
        let value = kernels::upsample_nearest(&self.value(), factor);
        Ok(self.graph.push(Op::Upsample { factor }, &[self.id], value))
    }

    pub fn sum_pool(&self, factor: usize) -> Result<Var<'g>> {
        let s = self.shape();
        ensure!(
            s.len() == 4 && factor >= 1 && s[2].is_multiple_of(factor) && s[3].is_multiple_of(factor),
            "sum_pool factor {factor} does not divide {:?}",
            s
        );
        if factor == 1 {
            return Ok(*self);
        }
        let value = kernels::sum_pool(&self.value(), factor);
        Ok(self.graph.push(Op::SumPool { factor }, &[self.id], value))
    }

    pub fn upsample_nearest_2x(&self) -> Result<Var<'g>> {
        self.upsample(2)
    }

    pub fn downsample_avg(&self, factor: usize) -> Result<Var<'g>> {
        Ok(self.sum_pool(factor)?.scale(1.0 / (factor * factor) as f64))
    }

    pub fn downsample_avg_2x(&self) -> Result<Var<'g>> {
        self.downsample_avg(2)
    }

    /// Stride-1 cross-correlation with "same" padding.
    pub fn conv2d(&self, weight: Var<'g>, padding: Padding) -> Result<Var<'g>> {
        kernels::check_conv(&self.shape(), &weight.shape())?;
        let value = kernels::conv2d(&self.value(), &weight.value(), padding);
        Ok(self.graph.push(Op::Conv { padding }, &[self.id, weight.id], value))
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
