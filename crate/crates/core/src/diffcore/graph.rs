//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a topological
//! order: every builder method only accepts ids that already exist. Forward
//! and backward passes are generic over [`Real`] so the same graph can be
//! replayed in `f64` by the finite-difference oracle.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub type Feed<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input { name: String, shape: Vec<usize> },
    Param { index: usize },
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    AddBias { x: NodeId, bias: NodeId },
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Euclidean norm of every leading-axis slice: `[B, ...] -> [B]`.
    RowNorm(NodeId),
    /// Unit-normalizes every row of a `[B, D]` matrix.
    L2Normalize(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Reshape(NodeId, Vec<usize>),
    /// `[B, ...] -> [B, rest]`.
    Flatten(NodeId),
    /// `[N, C, H, W] -> [N, C]`.
    GlobalAvgPool(NodeId),
    /// Identity forward, adjoint multiplied by the factor.
    GradScale(NodeId, f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::AddBias { .. } => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowNorm(_) => "row_norm",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Flatten(_) => "flatten",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::GradScale(..) => "grad_scale",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorm(a)
            | Op::L2Normalize(a)
            | Op::Reshape(a, _)
            | Op::Flatten(a)
            | Op::GlobalAvgPool(a)
            | Op::GradScale(a, _) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Overflow-safe `ln(1 + e^t)`.
pub fn softplus<T: Real>(t: T) -> T {
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    params: Vec<ParamEntry>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for id in op.inputs() {
            assert!(id.0 < self.nodes.len(), "node {} used before definition", id.0);
        }
        self.nodes.push(op);
        self.values.clear();
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn param_value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.clear();
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    }

    /// Registers a named parameter. Re-registering a name returns the
    /// existing node so shared weights stay shared.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        if let Some(index) = self.params.iter().position(|p| p.name == name) {
            let pos = self
                .nodes
                .iter()
                .position(|op| matches!(op, Op::Param { index: i } if *i == index))
                .expect("param node");
            return NodeId(pos);
        }
        self.params.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        let index = self.params.len() - 1;
        self.push(Op::Param { index })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.push(Op::Offset(a, shift))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { x, bias })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::ConvTranspose2d { x, w, stride, pad })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn row_norm(&mut self, x: NodeId) -> NodeId {
        self.push(Op::RowNorm(x))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Normalize(x))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn grad_scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::GradScale(x, factor))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    /// Runs the forward pass in `f32`, caching every node value for a later
    /// [`Graph::backward`]. Returns the marked outputs.
    pub fn evaluate(&mut self, feed: &Feed) -> Result<BTreeMap<String, Tensor>> {
        let params: Vec<Tensor> = self.params.iter().map(|p| p.value.clone()).collect();
        self.values = self.forward_with(feed, &params)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone()))
            .collect())
    }

    /// Cached value from the last [`Graph::evaluate`].
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0)
    }

    /// Gradients of a scalar node with respect to every trainable parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.values.len() != self.nodes.len() {
            return Err(Error::Invalid("backward called before evaluate".into()));
        }
        let adjoints = self.backward_with(&self.values, loss)?;
        Ok(Gradients::collect(self, adjoints))
    }

    /// Forward pass over any scalar type with an explicit parameter set
    /// (indexed like [`Graph::params`]).
    pub fn forward_with<T: Real>(&self, feed: &Feed<T>, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let v = forward_op(i, op, &values, feed, params, self)?;
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from `loss` given forward values. Returns the adjoint of
    /// every node that influences the loss through a path requiring grad.
    pub fn backward_with<T: Real>(&self, values: &[Tensor<T>], loss: NodeId) -> Result<Vec<Option<Tensor<T>>>> {
        let loss_val = &values[loss.0];
        if loss_val.len() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let needs = self.requires_grad();
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(loss_val.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            backward_op(&self.nodes[i], i, &g, values, &needs, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate() {
            needs[i] = match op {
                Op::Param { index } => self.params[*index].trainable,
                Op::Input { .. } | Op::Const(_) => false,
                other => other.inputs().iter().any(|id| needs[id.0]),
            };
        }
        needs
    }

    /// Sign pattern of every non-smooth op input; two evaluations with the
    /// same pattern lie on the same smooth piece of the function.
    pub fn kink_pattern<T: Real>(&self, values: &[Tensor<T>]) -> Vec<bool> {
        let mut pattern = Vec::new();
        for op in &self.nodes {
            match op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => {
                    pattern.extend(values[x.0].data().iter().map(|v| *v > T::zero()));
                }
                Op::RowNorm(x) | Op::L2Normalize(x) => {
                    pattern.extend(values[x.0].data().iter().map(|v| *v == T::zero()));
                }
                _ => {}
            }
        }
        pattern
    }
}

/// Adjoints of trainable parameters, keyed by name, plus raw node adjoints.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<(String, Tensor)>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    fn collect(graph: &Graph, adj: Vec<Option<Tensor>>) -> Self {
        let mut params = Vec::new();
        for (i, op) in graph.nodes.iter().enumerate() {
            if let Op::Param { index } = op {
                let entry = &graph.params[*index];
                if entry.trainable {
                    let g = adj[i]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
                    params.push((entry.name.clone(), g));
                }
            }
        }
        Self { params, nodes: adj }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|t| t.as_ref())
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn forward_op<T: Real>(
    i: usize,
    op: &Op,
    vals: &[Tensor<T>],
    feed: &Feed<T>,
    params: &[Tensor<T>],
    graph: &Graph,
) -> Result<Tensor<T>> {
    let same = |a: &NodeId, b: &NodeId| -> Result<()> {
        if vals[a.0].shape() != vals[b.0].shape() {
            return Err(shape_err(
                i,
                op,
                format!("operands {:?} and {:?}", vals[a.0].shape(), vals[b.0].shape()),
            ));
        }
        Ok(())
    };
    let zip = |a: &NodeId, b: &NodeId, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        let (x, y) = (&vals[a.0], &vals[b.0]);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    Ok(match op {
        Op::Input { name, shape } => {
            let t = feed.get(name).ok_or_else(|| Error::MissingInput(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    i,
                    op,
                    format!("input `{name}` declared {shape:?}, fed {:?}", t.shape()),
                ));
            }
            t.clone()
        }
        Op::Param { index } => {
            let t = &params[*index];
            if t.shape() != graph.params[*index].value.shape() {
                return Err(shape_err(i, op, format!("parameter `{}` changed shape", graph.params[*index].name)));
            }
            t.clone()
        }
        Op::Const(t) => t.cast(),
        Op::Add(a, b) => {
            same(a, b)?;
            zip(a, b, &|p, q| p + q)
        }
        Op::Sub(a, b) => {
            same(a, b)?;
            zip(a, b, &|p, q| p - q)
        }
        Op::Mul(a, b) => {
            same(a, b)?;
            zip(a, b, &|p, q| p * q)
        }
        Op::Scale(a, s) => {
            let s = T::from_f64(*s);
            vals[a.0].map(|v| v * s)
        }
        Op::Offset(a, s) => {
            let s = T::from_f64(*s);
            vals[a.0].map(|v| v + s)
        }
        Op::AddBias { x, bias } => {
            let (xv, bv) = (&vals[x.0], &vals[bias.0]);
            if xv.rank() < 2 || bv.rank() != 1 || bv.len() != xv.shape()[1] {
                return Err(shape_err(i, op, format!("x {:?} with bias {:?}", xv.shape(), bv.shape())));
            }
            let (outer, c, inner) = split_axis(xv.shape(), 1);
            let mut out = xv.clone();
            let data = out.data_mut();
            for o in 0..outer {
                for ch in 0..c {
                    let b = bv.data()[ch];
                    for v in &mut data[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                        *v = *v + b;
                    }
                }
            }
            out
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&vals[a.0], &vals[b.0]);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(shape_err(i, op, format!("{:?} x {:?}", av.shape(), bv.shape())));
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            Tensor::new(vec![m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let g = conv_geom(i, op, xv.shape(), wv.shape(), *stride, *pad)?;
            let co = wv.shape()[0];
            let n = xv.shape()[0];
            let out = kernels::conv2d(xv.data(), wv.data(), n, co, &g);
            Tensor::new(vec![n, co, g.out_height(), g.out_width()], out)?
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let g = transpose_geom(i, op, xv.shape(), wv.shape(), *stride, *pad)?;
            let n = xv.shape()[0];
            let out = kernels::conv_transpose2d(xv.data(), wv.data(), n, xv.shape()[1], &g);
            Tensor::new(vec![n, g.channels, g.height, g.width], out)?
        }
        Op::LeakyRelu(a, slope) => {
            let s = T::from_f64(*slope);
            vals[a.0].map(|v| if v > T::zero() { v } else { v * s })
        }
        Op::Softplus(a) => vals[a.0].map(softplus),
        Op::Sigmoid(a) => vals[a.0].map(sigmoid),
        Op::Abs(a) => vals[a.0].map(|v| v.abs()),
        Op::Sum(a) => Tensor::scalar(vals[a.0].sum()),
        Op::Mean(a) => {
            let v = &vals[a.0];
            if v.is_empty() {
                return Err(shape_err(i, op, "mean of empty tensor".into()));
            }
            Tensor::scalar(v.sum() / T::from_f64(v.len() as f64))
        }
        Op::RowNorm(a) => {
            let v = &vals[a.0];
            if v.rank() < 1 {
                return Err(shape_err(i, op, "needs a leading axis".into()));
            }
            let b = v.shape()[0];
            let d = v.len() / b.max(1);
            let data = (0..b)
                .map(|r| v.data()[r * d..(r + 1) * d].iter().map(|&x| x * x).sum::<T>().sqrt())
                .collect();
            Tensor::new(vec![b], data)?
        }
        Op::L2Normalize(a) => {
            let v = &vals[a.0];
            if v.rank() != 2 {
                return Err(shape_err(i, op, format!("expects [B, D], got {:?}", v.shape())));
            }
            let d = v.shape()[1];
            let mut out = v.clone();
            for row in out.data_mut().chunks_mut(d.max(1)) {
                let r = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::from_f64(NORM_FLOOR));
                for x in row {
                    *x = *x / r;
                }
            }
            out
        }
        Op::Concat { parts, axis } => {
            let first = &vals[parts[0].0];
            if *axis >= first.rank() {
                return Err(shape_err(i, op, format!("axis {axis} out of range for {:?}", first.shape())));
            }
            let mut total = 0;
            for p in parts {
                let s = vals[p.0].shape();
                let ok = s.len() == first.rank()
                    && s.iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                if !ok {
                    return Err(shape_err(i, op, format!("part {:?} vs {:?}", s, first.shape())));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &vals[p.0];
                    let len = v.shape()[*axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, data)?
        }
        Op::Slice { x, axis, start, len } => {
            let v = &vals[x.0];
            if *axis >= v.rank() || start + len > v.shape()[*axis] {
                return Err(shape_err(i, op, format!("slice {start}+{len} on axis {axis} of {:?}", v.shape())));
            }
            let (outer, n, inner) = split_axis(v.shape(), *axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, data)?
        }
        Op::Reshape(a, shape) => vals[a.0]
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err(i, op, e.to_string()))?,
        Op::Flatten(a) => {
            let v = &vals[a.0];
            if v.rank() == 0 || v.shape()[0] == 0 {
                return Err(shape_err(i, op, format!("cannot flatten {:?}", v.shape())));
            }
            let b = v.shape()[0];
            v.clone().reshape(&[b, v.len() / b])?
        }
        Op::GlobalAvgPool(a) => {
            let v = &vals[a.0];
            if v.rank() != 4 {
                return Err(shape_err(i, op, format!("expects NCHW, got {:?}", v.shape())));
            }
            let (n, c) = (v.shape()[0], v.shape()[1]);
            let hw = v.shape()[2] * v.shape()[3];
            let inv = T::from_f64(1.0 / hw as f64);
            let data = v.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            Tensor::new(vec![n, c], data)?
        }
        Op::GradScale(a, _) => vals[a.0].clone(),
    })
}

fn conv_geom(i: usize, op: &Op, x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || stride == 0 {
        return Err(shape_err(i, op, format!("input {x:?} with weight {w:?}")));
    }
    if x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(shape_err(i, op, format!("kernel {} larger than padded input {x:?}", w[2])));
    }
    Ok(ConvGeom {
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel: w[2],
        stride,
        pad,
    })
}

fn transpose_geom(i: usize, op: &Op, x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || w[0] != x[1] || w[2] != w[3] || stride == 0 {
        return Err(shape_err(i, op, format!("input {x:?} with weight {w:?}")));
    }
    kernels::transpose_geom(w[1], x[2], x[3], w[2], stride, pad)
        .ok_or_else(|| shape_err(i, op, format!("no output geometry for {x:?} stride {stride} pad {pad}")))
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backward_op<T: Real>(op: &Op, i: usize, g: &Tensor<T>, vals: &[Tensor<T>], needs: &[bool], adj: &mut [Option<Tensor<T>>]) {
    let need = |id: &NodeId| needs[id.0];
    let shaped = |like: &Tensor<T>, data: Vec<T>| Tensor::new(like.shape().to_vec(), data).expect("shape");
    let elementwise = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        shaped(x, x.data().iter().zip(g.data()).map(|(&xv, &gv)| f(xv, gv)).collect())
    };
    match op {
        Op::Input { .. } | Op::Param { .. } | Op::Const(_) => {}
        Op::Add(a, b) => {
            if need(a) {
                accumulate(adj, *a, g.clone());
            }
            if need(b) {
                accumulate(adj, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if need(a) {
                accumulate(adj, *a, g.clone());
            }
            if need(b) {
                accumulate(adj, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if need(a) {
                accumulate(adj, *a, elementwise(&vals[b.0], &|bv, gv| bv * gv));
            }
            if need(b) {
                accumulate(adj, *b, elementwise(&vals[a.0], &|av, gv| av * gv));
            }
        }
        Op::Scale(a, s) | Op::GradScale(a, s) => {
            if need(a) {
                let s = T::from_f64(*s);
                accumulate(adj, *a, g.map(|v| v * s));
            }
        }
        Op::Offset(a, _) => {
            if need(a) {
                accumulate(adj, *a, g.clone());
            }
        }
        Op::AddBias { x, bias } => {
            if need(x) {
                accumulate(adj, *x, g.clone());
            }
            if need(bias) {
                let (outer, c, inner) = split_axis(g.shape(), 1);
                let mut db = vec![T::zero(); c];
                for o in 0..outer {
                    for (ch, d) in db.iter_mut().enumerate() {
                        let s: T = g.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner].iter().copied().sum();
                        *d = *d + s;
                    }
                }
                accumulate(adj, *bias, Tensor::from_vec(db));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&vals[a.0], &vals[b.0]);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let (da, db) = kernels::matmul_backward(av.data(), bv.data(), g.data(), m, k, n, need(a), need(b));
            if let Some(da) = da {
                accumulate(adj, *a, shaped(av, da));
            }
            if let Some(db) = db {
                accumulate(adj, *b, shaped(bv, db));
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let geom = conv_geom(i, op, xv.shape(), wv.shape(), *stride, *pad).expect("checked in forward");
            let (dx, dw) = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), xv.shape()[0], wv.shape()[0], &geom, need(x), need(w));
            if let Some(dx) = dx {
                accumulate(adj, *x, shaped(xv, dx));
            }
            if let Some(dw) = dw {
                accumulate(adj, *w, shaped(wv, dw));
            }
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let geom = transpose_geom(i, op, xv.shape(), wv.shape(), *stride, *pad).expect("checked in forward");
            let (dx, dw) = kernels::conv_transpose2d_backward(
                xv.data(),
                wv.data(),
                g.data(),
                xv.shape()[0],
                xv.shape()[1],
                &geom,
                need(x),
                need(w),
            );
            if let Some(dx) = dx {
                accumulate(adj, *x, shaped(xv, dx));
            }
            if let Some(dw) = dw {
                accumulate(adj, *w, shaped(wv, dw));
            }
        }
        Op::LeakyRelu(a, slope) => {
            if need(a) {
                let s = T::from_f64(*slope);
                accumulate(adj, *a, elementwise(&vals[a.0], &|xv, gv| if xv > T::zero() { gv } else { gv * s }));
            }
        }
        Op::Softplus(a) => {
            if need(a) {
                accumulate(adj, *a, elementwise(&vals[a.0], &|xv, gv| gv * sigmoid(xv)));
            }
        }
        Op::Sigmoid(a) => {
            if need(a) {
                let y = &vals[i];
                accumulate(adj, *a, elementwise(y, &|yv, gv| gv * yv * (T::one() - yv)));
            }
        }
        Op::Abs(a) => {
            if need(a) {
                accumulate(
                    adj,
                    *a,
                    elementwise(&vals[a.0], &|xv, gv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
        }
        Op::Sum(a) => {
            if need(a) {
                accumulate(adj, *a, Tensor::full(vals[a.0].shape(), g.item()));
            }
        }
        Op::Mean(a) => {
            if need(a) {
                let v = &vals[a.0];
                accumulate(adj, *a, Tensor::full(v.shape(), g.item() / T::from_f64(v.len() as f64)));
            }
        }
        Op::RowNorm(a) => {
            if need(a) {
                let (x, y) = (&vals[a.0], &vals[i]);
                let b = x.shape()[0];
                let d = x.len() / b.max(1);
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..b {
                    let norm = y.data()[r];
                    if norm > T::zero() {
                        let f = g.data()[r] / norm;
                        for (o, &xv) in dx[r * d..(r + 1) * d].iter_mut().zip(&x.data()[r * d..(r + 1) * d]) {
                            *o = xv * f;
                        }
                    }
                }
                accumulate(adj, *a, shaped(x, dx));
            }
        }
        Op::L2Normalize(a) => {
            if need(a) {
                let (x, y) = (&vals[a.0], &vals[i]);
                let d = x.shape()[1];
                let floor = T::from_f64(NORM_FLOOR);
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..x.shape()[0] {
                    let xs = &x.data()[r * d..(r + 1) * d];
                    let ys = &y.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let out = &mut dx[r * d..(r + 1) * d];
                    if norm > floor {
                        let dot: T = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
                            *o = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gs) {
                            *o = gv / floor;
                        }
                    }
                }
                accumulate(adj, *a, shaped(x, dx));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let v = &vals[p.0];
                let len = v.shape()[*axis];
                if need(p) {
                    let mut data = Vec::with_capacity(v.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    accumulate(adj, *p, shaped(v, data));
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start, len } => {
            if need(x) {
                let v = &vals[x.0];
                let (outer, n, inner) = split_axis(v.shape(), *axis);
                let mut data = vec![T::zero(); v.len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(adj, *x, shaped(v, data));
            }
        }
        Op::Reshape(a, _) | Op::Flatten(a) => {
            if need(a) {
                accumulate(adj, *a, shaped(&vals[a.0], g.data().to_vec()));
            }
        }
        Op::GlobalAvgPool(a) => {
            if need(a) {
                let v = &vals[a.0];
                let hw = v.shape()[2] * v.shape()[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut data = Vec::with_capacity(v.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv * inv).take(hw));
                }
                accumulate(adj, *a, shaped(v, data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(pairs: &[(&str, Tensor)]) -> Feed {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let t = g.input("t", &[]);
        let y = g.softplus(t);
        g.mark_output("y", y);
        let out = g.evaluate(&feed(&[("t", Tensor::scalar(0.0))])).unwrap();
        assert!((out["y"].item() as f64 - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert!(softplus(-1000.0f32) >= 0.0 && softplus(-1000.0f32) < 1e-30);
        assert!((softplus(-1.0f64) - 0.313261687518).abs() < 1e-9);
        assert!((softplus(1.0f64) - 1.313261687518).abs() < 1e-9);
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3]);
        g.mark_output("x", x);
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        let out = g.evaluate(&feed(&[("x", t.clone())])).unwrap();
        assert_eq!(out["x"], t);
    }

    #[test]
    fn dot_self_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        g.evaluate(&Feed::new()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.node(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut g = Graph::new();
        let t = g.param("t", Tensor::scalar(0.0), true);
        let y = g.softplus(t);
        g.evaluate(&Feed::new()).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("t").unwrap().item(), 0.5);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        g.evaluate(&Feed::new()).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2]);
        let b = g.input("b", &[3]);
        let _ = g.add(a, b);
        let err = g
            .evaluate(&feed(&[("a", Tensor::from_vec(vec![0.0; 2])), ("b", Tensor::from_vec(vec![0.0; 3]))]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 2") && msg.contains("add"), "{msg}");

        let mut g = Graph::new();
        let a = g.input("a", &[2]);
        g.mark_output("a", a);
        assert!(g.evaluate(&feed(&[("a", Tensor::from_vec(vec![0.0; 4]))])).is_err());
        assert!(matches!(g.evaluate(&Feed::new()), Err(Error::MissingInput(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(3.0), false);
        let b = g.param("b", Tensor::scalar(2.0), true);
        let p = g.mul(a, b);
        g.evaluate(&Feed::new()).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get("a").is_none());
        assert_eq!(grads.get("b").unwrap().item(), 3.0);
    }

    #[test]
    fn shared_param_registers_once() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(3.0), true);
        let a2 = g.param("a", Tensor::scalar(99.0), true);
        assert_eq!(a, a2);
        let p = g.mul(a, a2);
        g.evaluate(&Feed::new()).unwrap();
        assert_eq!(g.backward(p).unwrap().get("a").unwrap().item(), 6.0);
    }

    #[test]
    fn l2_normalize_rows_are_unit() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3]);
        let y = g.l2_normalize(x);
        g.mark_output("y", y);
        let out = g
            .evaluate(&feed(&[("x", Tensor::new(vec![2, 3], vec![3.0, 4.0, 0.0, -1.0, 2.0, 2.0]).unwrap())]))
            .unwrap();
        for row in out["y"].data().chunks(3) {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 4, 3]);
        let a = g.slice(x, 1, 0, 1);
        let b = g.slice(x, 1, 1, 3);
        let c = g.concat(&[a, b], 1);
        g.mark_output("c", c);
        let t = Tensor::new(vec![2, 4, 3], (0..24).map(|v| v as f32).collect()).unwrap();
        let out = g.evaluate(&feed(&[("x", t.clone())])).unwrap();
        assert_eq!(out["c"], t);
    }
}
