//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes live in an arena owned by [`Graph`]; a [`NodeId`] is an index into
//! it. Nodes are appended in forward order, so the arena order is already a
//! topological order and the backward pass is a single reverse sweep.
//! Gradients accumulate by summation across fan-out. A graph is built fresh
//! for every forward pass, which keeps variable-length conversations simple.

#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::fsum::exact_sum;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are floored at this value inside `log`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`] arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation request passed to [`Graph::apply`].
///
/// Kinds that need more than node inputs carry their extra data here, so a
/// single `apply` entry point can build every node the model needs.
#[derive(Clone, Debug)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    /// Broadcast multiply of a scalar-shaped node over a tensor node.
    ScalarMul,
    ConcatLastAxis,
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxLastAxis,
    /// Column-wise max over a single rank-2 input, or elementwise max over
    /// several rank-1 inputs (one per time step).
    MaxOverTime,
    Dot,
    /// Row lookup into an embedding table node.
    EmbeddingLookup(usize),
    /// Valid 1-D convolution over time. Inputs: `[weight, bias, x_1..x_n]`.
    Conv1dValid,
    /// Inverted dropout: kept activations are scaled by 1/(1-p), so
    /// evaluation needs no rescaling. Identity when `train` is false or p=0.
    Dropout { p: f64, train: bool },
    Sum,
    Mean,
    /// Elementwise natural log, floored at [`LOG_FLOOR`].
    Log,
    /// Exactly rounded weighted sum. Inputs: `[weights, m_1..m_k]`.
    WeightedSum,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise-mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::ConcatLastAxis => "concat-last-axis",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::SoftmaxLastAxis => "softmax-last-axis",
            OpKind::MaxOverTime => "max-over-time",
            OpKind::Dot => "dot",
            OpKind::EmbeddingLookup(_) => "embedding-lookup",
            OpKind::Conv1dValid => "conv1d-valid",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Log => "log",
            OpKind::WeightedSum => "weighted-sum",
        }
    }
}

/// Recorded operation: parents plus whatever backward needs.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    MaxOverTime(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Embed { table: NodeId, index: usize },
    Conv1d { weight: NodeId, bias: NodeId, words: Vec<NodeId> },
    Dropout { input: NodeId, mask: Option<Vec<f64>> },
    Sum(NodeId),
    Mean(NodeId),
    Log(NodeId),
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScalarMul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Concat(ids) | Op::MaxOverTime(ids) => ids.clone(),
            Op::Tanh(a) | Op::Sigmoid(a) | Op::Relu(a) | Op::Softmax(a) | Op::Sum(a)
            | Op::Mean(a) | Op::Log(a) | Op::Dropout { input: a, .. } => vec![*a],
            Op::Embed { table, .. } => vec![*table],
            Op::Conv1d { weight, bias, words } => {
                let mut p = vec![*weight, *bias];
                p.extend_from_slice(words);
                p
            }
            Op::WeightedSum { weights, items } => {
                let mut p = vec![*weights];
                p.extend_from_slice(items);
                p
            }
        }
    }
}

struct NodeData {
    tensor: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

/// Arena of nodes plus the RNG used for dropout masks.
pub struct Graph {
    nodes: Vec<NodeData>,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_seed(0)
    }

    /// The seed only affects dropout masks; two graphs built with the same
    /// seed and the same op sequence are identical.
    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input node (parameter binding or constant).
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].tensor
    }

    /// Populated for every node reachable from the loss after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.index()].grad.as_ref()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.index()].op.parents()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        debug_assert!(tensor.all_finite(), "non-finite forward result");
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeData { tensor, op, grad: None });
        id
    }

    fn tensor_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].tensor
    }

    // ── Forward ──────────────────────────────────────────────────────

    /// Builds one node. Shape mismatches name the op and the offending
    /// extents.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = kind.name();
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::dim(name, format!("expected {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let t = matmul_forward(self.tensor_of(a), self.tensor_of(b))?;
                Ok(self.push(t, Op::Matmul(a, b)))
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.tensor_of(a), self.tensor_of(b));
                if ta.shape() != tb.shape() {
                    return Err(Error::dim(
                        name,
                        format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
                    ));
                }
                let data: Vec<f64> = match kind {
                    OpKind::Add => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
                    OpKind::Sub => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
                    _ => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                };
                let t = Tensor::new(ta.shape().to_vec(), data)?;
                let op = match kind {
                    OpKind::Add => Op::Add(a, b),
                    OpKind::Sub => Op::Sub(a, b),
                    _ => Op::Mul(a, b),
                };
                Ok(self.push(t, op))
            }
            OpKind::ScalarMul => {
                arity(2)?;
                let (s, x) = (inputs[0], inputs[1]);
                let ts = self.tensor_of(s);
                if !ts.is_scalar() {
                    return Err(Error::dim(
                        name,
                        format!("first input must be scalar-shaped, got {:?}", ts.shape()),
                    ));
                }
                let c = ts.item();
                let tx = self.tensor_of(x);
                let data = tx.data().iter().map(|v| c * v).collect();
                let t = Tensor::new(tx.shape().to_vec(), data)?;
                Ok(self.push(t, Op::ScalarMul(s, x)))
            }
            OpKind::ConcatLastAxis => {
                if inputs.is_empty() {
                    return Err(Error::dim(name, "needs at least one input".to_string()));
                }
                let rank = self.tensor_of(inputs[0]).rank();
                if rank != 1 && rank != 2 {
                    return Err(Error::dim(name, format!("rank {rank} unsupported")));
                }
                for &id in inputs {
                    let t = self.tensor_of(id);
                    if t.rank() != rank {
                        return Err(Error::dim(
                            name,
                            format!("mixed ranks: {:?} vs rank {rank}", t.shape()),
                        ));
                    }
                    if rank == 2 && t.rows() != self.tensor_of(inputs[0]).rows() {
                        return Err(Error::dim(
                            name,
                            format!(
                                "row counts differ: {} vs {}",
                                t.rows(),
                                self.tensor_of(inputs[0]).rows()
                            ),
                        ));
                    }
                }
                let t = if rank == 1 {
                    let mut data = Vec::new();
                    for &id in inputs {
                        data.extend_from_slice(self.tensor_of(id).data());
                    }
                    Tensor::vector(data)
                } else {
                    let rows = self.tensor_of(inputs[0]).rows();
                    let total_cols: usize = inputs.iter().map(|&id| self.tensor_of(id).cols()).sum();
                    let mut data = Vec::with_capacity(rows * total_cols);
                    for r in 0..rows {
                        for &id in inputs {
                            data.extend_from_slice(self.tensor_of(id).row(r));
                        }
                    }
                    Tensor::matrix(rows, total_cols, data)?
                };
                Ok(self.push(t, Op::Concat(inputs.to_vec())))
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Relu | OpKind::Log => {
                arity(1)?;
                let x = inputs[0];
                let tx = self.tensor_of(x);
                let data: Vec<f64> = match kind {
                    OpKind::Tanh => tx.data().iter().map(|v| v.tanh()).collect(),
                    OpKind::Sigmoid => tx.data().iter().map(|v| sigmoid(*v)).collect(),
                    OpKind::Relu => tx.data().iter().map(|v| v.max(0.0)).collect(),
                    _ => tx.data().iter().map(|v| v.max(LOG_FLOOR).ln()).collect(),
                };
                let t = Tensor::new(tx.shape().to_vec(), data)?;
                let op = match kind {
                    OpKind::Tanh => Op::Tanh(x),
                    OpKind::Sigmoid => Op::Sigmoid(x),
                    OpKind::Relu => Op::Relu(x),
                    _ => Op::Log(x),
                };
                Ok(self.push(t, op))
            }
            OpKind::SoftmaxLastAxis => {
                arity(1)?;
                let x = inputs[0];
                let tx = self.tensor_of(x);
                let t = match tx.rank() {
                    1 => Tensor::vector(softmax_slice(tx.data())),
                    2 => {
                        let (r, c) = (tx.rows(), tx.cols());
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend(softmax_slice(tx.row(i)));
                        }
                        Tensor::matrix(r, c, data)?
                    }
                    rank => return Err(Error::dim(name, format!("rank {rank} unsupported"))),
                };
                Ok(self.push(t, Op::Softmax(x)))
            }
            OpKind::MaxOverTime => {
                if inputs.is_empty() {
                    return Err(Error::dim(name, "needs at least one input".to_string()));
                }
                let t = if inputs.len() == 1 {
                    let tx = self.tensor_of(inputs[0]);
                    match tx.rank() {
                        1 => Tensor::vector(tx.data().to_vec()),
                        2 => {
                            let (r, c) = (tx.rows(), tx.cols());
                            let mut out = tx.row(0).to_vec();
                            for i in 1..r {
                                for j in 0..c {
                                    out[j] = out[j].max(tx.at2(i, j));
                                }
                            }
                            Tensor::vector(out)
                        }
                        rank => return Err(Error::dim(name, format!("rank {rank} unsupported"))),
                    }
                } else {
                    let shape = self.tensor_of(inputs[0]).shape().to_vec();
                    for &id in inputs {
                        let t = self.tensor_of(id);
                        if t.rank() != 1 || t.shape() != shape.as_slice() {
                            return Err(Error::dim(
                                name,
                                format!("step shapes differ: {:?} vs {:?}", t.shape(), shape),
                            ));
                        }
                    }
                    let mut out = self.tensor_of(inputs[0]).data().to_vec();
                    for &id in &inputs[1..] {
                        for (o, v) in out.iter_mut().zip(self.tensor_of(id).data()) {
                            *o = o.max(*v);
                        }
                    }
                    Tensor::vector(out)
                };
                Ok(self.push(t, Op::MaxOverTime(inputs.to_vec())))
            }
            OpKind::Dot => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (ta, tb) = (self.tensor_of(a), self.tensor_of(b));
                if ta.rank() != 1 || tb.rank() != 1 || ta.shape() != tb.shape() {
                    return Err(Error::dim(
                        name,
                        format!("need equal-length vectors, got {:?} and {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                Ok(self.push(Tensor::scalar(v), Op::Dot(a, b)))
            }
            OpKind::EmbeddingLookup(index) => {
                arity(1)?;
                let table = inputs[0];
                let tt = self.tensor_of(table);
                if tt.rank() != 2 {
                    return Err(Error::dim(name, format!("table must be rank 2, got {:?}", tt.shape())));
                }
                if index >= tt.rows() {
                    return Err(Error::dim(
                        name,
                        format!("index {index} out of range for table with {} rows", tt.rows()),
                    ));
                }
                let t = Tensor::vector(tt.row(index).to_vec());
                Ok(self.push(t, Op::Embed { table, index }))
            }
            OpKind::Conv1dValid => {
                if inputs.len() < 3 {
                    return Err(Error::dim(name, "needs weight, bias and at least one step".to_string()));
                }
                let (weight, bias) = (inputs[0], inputs[1]);
                let words = &inputs[2..];
                let tw = self.tensor_of(weight);
                let tb = self.tensor_of(bias);
                let d = {
                    let t0 = self.tensor_of(words[0]);
                    if t0.rank() != 1 {
                        return Err(Error::dim(name, format!("steps must be vectors, got {:?}", t0.shape())));
                    }
                    t0.numel()
                };
                for &w in words {
                    if self.tensor_of(w).shape() != [d] {
                        return Err(Error::dim(
                            name,
                            format!("step shapes differ: {:?} vs [{d}]", self.tensor_of(w).shape()),
                        ));
                    }
                }
                if tw.rank() != 2 || !tw.cols().is_multiple_of(d) {
                    return Err(Error::dim(
                        name,
                        format!("weight {:?} incompatible with step dim {d}", tw.shape()),
                    ));
                }
                let width = tw.cols() / d;
                let maps = tw.rows();
                if tb.shape() != [maps] {
                    return Err(Error::dim(
                        name,
                        format!("bias {:?} does not match {maps} maps", tb.shape()),
                    ));
                }
                let n = words.len();
                if n < width {
                    return Err(Error::dim(
                        name,
                        format!("{n} steps shorter than filter width {width}"),
                    ));
                }
                let positions = n - width + 1;
                let mut data = Vec::with_capacity(positions * maps);
                for p in 0..positions {
                    for m in 0..maps {
                        let wrow = self.tensor_of(weight).row(m);
                        let mut acc = self.tensor_of(bias).data()[m];
                        for j in 0..width {
                            let x = self.tensor_of(words[p + j]).data();
                            let w = &wrow[j * d..(j + 1) * d];
                            acc += x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                        }
                        data.push(acc);
                    }
                }
                let t = Tensor::matrix(positions, maps, data)?;
                Ok(self.push(
                    t,
                    Op::Conv1d { weight, bias, words: words.to_vec() },
                ))
            }
            OpKind::Dropout { p, train } => {
                arity(1)?;
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::contract(format!("dropout rate {p} outside [0,1)")));
                }
                let x = inputs[0];
                let tx = self.tensor_of(x);
                if !train || p == 0.0 {
                    let t = tx.clone();
                    return Ok(self.push(t, Op::Dropout { input: x, mask: None }));
                }
                let keep_scale = 1.0 / (1.0 - p);
                let n = tx.numel();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep_scale })
                    .collect();
                let tx = self.tensor_of(x);
                let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                let t = Tensor::new(tx.shape().to_vec(), data)?;
                Ok(self.push(t, Op::Dropout { input: x, mask: Some(mask) }))
            }
            OpKind::Sum | OpKind::Mean => {
                arity(1)?;
                let x = inputs[0];
                let tx = self.tensor_of(x);
                let s: f64 = tx.data().iter().sum();
                let v = if matches!(kind, OpKind::Mean) {
                    s / tx.numel() as f64
                } else {
                    s
                };
                let op = if matches!(kind, OpKind::Mean) { Op::Mean(x) } else { Op::Sum(x) };
                Ok(self.push(Tensor::scalar(v), op))
            }
            OpKind::WeightedSum => {
                if inputs.len() < 2 {
                    return Err(Error::dim(name, "needs weights and at least one item".to_string()));
                }
                let weights = inputs[0];
                let items = &inputs[1..];
                let tw = self.tensor_of(weights);
                if tw.rank() != 1 || tw.numel() != items.len() {
                    return Err(Error::dim(
                        name,
                        format!("weights {:?} do not match {} items", tw.shape(), items.len()),
                    ));
                }
                let d = self.tensor_of(items[0]).numel();
                for &m in items {
                    let t = self.tensor_of(m);
                    if t.rank() != 1 || t.numel() != d {
                        return Err(Error::dim(
                            name,
                            format!("item shapes differ: {:?} vs [{d}]", t.shape()),
                        ));
                    }
                }
                let w = self.tensor_of(weights).data().to_vec();
                let data: Vec<f64> = (0..d)
                    .map(|i| {
                        exact_sum(
                            items
                                .iter()
                                .enumerate()
                                .map(|(k, &m)| w[k] * self.tensor_of(m).data()[i]),
                        )
                    })
                    .collect();
                Ok(self.push(
                    Tensor::vector(data),
                    Op::WeightedSum { weights, items: items.to_vec() },
                ))
            }
        }
    }

    // Thin wrappers so call sites read naturally.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ScalarMul, &[s, x])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatLastAxis, parts)
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[x])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxLastAxis, &[x])
    }
    pub fn max_over_time(&mut self, steps: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::MaxOverTime, steps)
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Dot, &[a, b])
    }
    pub fn embed(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        self.apply(OpKind::EmbeddingLookup(index), &[table])
    }
    pub fn conv1d(&mut self, weight: NodeId, bias: NodeId, words: &[NodeId]) -> Result<NodeId> {
        let mut inputs = vec![weight, bias];
        inputs.extend_from_slice(words);
        self.apply(OpKind::Conv1dValid, &inputs)
    }
    pub fn dropout(&mut self, x: NodeId, p: f64, train: bool) -> Result<NodeId> {
        self.apply(OpKind::Dropout { p, train }, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[x])
    }
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let mut inputs = vec![weights];
        inputs.extend_from_slice(items);
        self.apply(OpKind::WeightedSum, &inputs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar-shaped loss. Every node reachable from
    /// the loss ends up with a gradient of the same shape as its tensor.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.tensor_of(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar-shaped loss, got shape {:?}",
                self.tensor_of(loss).shape()
            )));
        }
        self.nodes[loss.index()].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index()).rev() {
            let Some(out_grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op, out_grad.data());
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let node = &mut self.nodes[id.index()];
        debug_assert_eq!(delta.len(), node.tensor.numel());
        match &mut node.grad {
            Some(g) => {
                for (g, d) in g.data_mut().iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => {
                let mut g = Tensor::zeros(node.tensor.shape());
                g.data_mut().copy_from_slice(delta);
                node.grad = Some(g);
            }
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, d_out: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let ta = self.tensor_of(*a).clone();
                let tb = self.tensor_of(*b).clone();
                if tb.rank() == 2 {
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut d_a = vec![0.0; m * k];
                    let mut d_b = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += d_out[i * n + c] * tb.at2(j, c);
                            }
                            d_a[i * k + j] = acc;
                        }
                    }
                    for j in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ta.at2(i, j) * d_out[i * n + c];
                            }
                            d_b[j * n + c] = acc;
                        }
                    }
                    self.add_grad(*a, &d_a);
                    self.add_grad(*b, &d_b);
                } else {
                    // out[i] = sum_j a[i,j] * b[j]
                    let (m, k) = (ta.rows(), ta.cols());
                    let xb = tb.data();
                    let mut d_a = vec![0.0; m * k];
                    let mut d_b = vec![0.0; k];
                    for i in 0..m {
                        for j in 0..k {
                            d_a[i * k + j] = d_out[i] * xb[j];
                            d_b[j] += ta.at2(i, j) * d_out[i];
                        }
                    }
                    self.add_grad(*a, &d_a);
                    self.add_grad(*b, &d_b);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, d_out);
                self.add_grad(*b, d_out);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ta = self.tensor_of(*a).clone();
                let tb = self.tensor_of(*b).clone();
                let d_a: Vec<f64> = d_out.iter().zip(tb.data()).map(|(d, y)| d * y).collect();
                let d_b: Vec<f64> = d_out.iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                self.add_grad(*a, &d_a);
                self.add_grad(*b, &d_b);
            }
            Op::ScalarMul(s, x) => {
                let c = self.tensor_of(*s).item();
                let tx = self.tensor_of(*x).clone();
                let d_s: f64 = d_out.iter().zip(tx.data()).map(|(d, v)| d * v).sum();
                let d_x: Vec<f64> = d_out.iter().map(|d| c * d).collect();
                self.add_grad(*s, &[d_s]);
                self.add_grad(*x, &d_x);
            }
            Op::Concat(parts) => {
                let rank = self.tensor_of(parts[0]).rank();
                if rank == 1 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.tensor_of(p).numel();
                        let piece = d_out[offset..offset + n].to_vec();
                        self.add_grad(p, &piece);
                        offset += n;
                    }
                } else {
                    let rows = self.tensor_of(parts[0]).rows();
                    let total_cols: usize = parts.iter().map(|&p| self.tensor_of(p).cols()).sum();
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.tensor_of(p).cols();
                        let mut piece = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let start = r * total_cols + offset;
                            piece.extend_from_slice(&d_out[start..start + cols]);
                        }
                        self.add_grad(p, &piece);
                        offset += cols;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = self.nodes[out_idx].tensor.clone();
                let d_x: Vec<f64> = d_out.iter().zip(y.data()).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.add_grad(*x, &d_x);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[out_idx].tensor.clone();
                let d_x: Vec<f64> = d_out.iter().zip(y.data()).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.add_grad(*x, &d_x);
            }
            Op::Relu(x) => {
                let tx = self.tensor_of(*x).clone();
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(tx.data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.add_grad(*x, &d_x);
            }
            Op::Softmax(x) => {
                let y = self.nodes[out_idx].tensor.clone();
                let tx = self.tensor_of(*x);
                let (rows, cols) = if tx.rank() == 1 {
                    (1, tx.numel())
                } else {
                    (tx.rows(), tx.cols())
                };
                let mut d_x = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let dr = &d_out[r * cols..(r + 1) * cols];
                    let inner: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for c in 0..cols {
                        d_x[r * cols + c] = yr[c] * (dr[c] - inner);
                    }
                }
                self.add_grad(*x, &d_x);
            }
            Op::MaxOverTime(steps) => {
                if steps.len() == 1 {
                    let tx = self.tensor_of(steps[0]).clone();
                    if tx.rank() == 1 {
                        self.add_grad(steps[0], d_out);
                    } else {
                        // Ties route to the first maximal row.
                        let (rows, cols) = (tx.rows(), tx.cols());
                        let mut d_x = vec![0.0; rows * cols];
                        for j in 0..cols {
                            let mut best = 0;
                            for i in 1..rows {
                                if tx.at2(i, j) > tx.at2(best, j) {
                                    best = i;
                                }
                            }
                            d_x[best * cols + j] = d_out[j];
                        }
                        self.add_grad(steps[0], &d_x);
                    }
                } else {
                    let d = self.tensor_of(steps[0]).numel();
                    let mut winners = vec![0usize; d];
                    for (k, &s) in steps.iter().enumerate().skip(1) {
                        let data = self.tensor_of(s).data();
                        for (j, w) in winners.iter_mut().enumerate() {
                            if data[j] > self.tensor_of(steps[*w]).data()[j] {
                                *w = k;
                            }
                        }
                    }
                    for (k, &s) in steps.iter().enumerate() {
                        let mut d_x = vec![0.0; d];
                        for j in 0..d {
                            if winners[j] == k {
                                d_x[j] = d_out[j];
                            }
                        }
                        self.add_grad(s, &d_x);
                    }
                }
            }
            Op::Dot(a, b) => {
                let ta = self.tensor_of(*a).clone();
                let tb = self.tensor_of(*b).clone();
                let d = d_out[0];
                let d_a: Vec<f64> = tb.data().iter().map(|v| d * v).collect();
                let d_b: Vec<f64> = ta.data().iter().map(|v| d * v).collect();
                self.add_grad(*a, &d_a);
                self.add_grad(*b, &d_b);
            }
            Op::Embed { table, index } => {
                let tt = self.tensor_of(*table);
                let (rows, cols) = (tt.rows(), tt.cols());
                let mut d_t = vec![0.0; rows * cols];
                d_t[index * cols..(index + 1) * cols].copy_from_slice(d_out);
                self.add_grad(*table, &d_t);
            }
            Op::Conv1d { weight, bias, words } => {
                let tw = self.tensor_of(*weight).clone();
                let d = self.tensor_of(words[0]).numel();
                let width = tw.cols() / d;
                let maps = tw.rows();
                let positions = words.len() - width + 1;
                let mut d_w = vec![0.0; maps * tw.cols()];
                let mut d_b = vec![0.0; maps];
                let mut d_x = vec![vec![0.0; d]; words.len()];
                for p in 0..positions {
                    for m in 0..maps {
                        let g = d_out[p * maps + m];
                        if g == 0.0 {
                            continue;
                        }
                        d_b[m] += g;
                        for j in 0..width {
                            let x = self.tensor_of(words[p + j]).data();
                            for c in 0..d {
                                d_w[m * tw.cols() + j * d + c] += g * x[c];
                                d_x[p + j][c] += g * tw.at2(m, j * d + c);
                            }
                        }
                    }
                }
                self.add_grad(*weight, &d_w);
                self.add_grad(*bias, &d_b);
                for (i, &word) in words.iter().enumerate() {
                    self.add_grad(word, &d_x[i]);
                }
            }
            Op::Dropout { input, mask } => match mask {
                None => self.add_grad(*input, d_out),
                Some(mask) => {
                    let d_x: Vec<f64> = d_out.iter().zip(mask).map(|(d, m)| d * m).collect();
                    self.add_grad(*input, &d_x);
                }
            },
            Op::Sum(x) => {
                let n = self.tensor_of(*x).numel();
                let d_x = vec![d_out[0]; n];
                self.add_grad(*x, &d_x);
            }
            Op::Mean(x) => {
                let n = self.tensor_of(*x).numel();
                let d_x = vec![d_out[0] / n as f64; n];
                self.add_grad(*x, &d_x);
            }
            Op::Log(x) => {
                let tx = self.tensor_of(*x).clone();
                let d_x: Vec<f64> = d_out
                    .iter()
                    .zip(tx.data())
                    .map(|(d, v)| if *v > LOG_FLOOR { d / v } else { 0.0 })
                    .collect();
                self.add_grad(*x, &d_x);
            }
            Op::WeightedSum { weights, items } => {
                let w = self.tensor_of(*weights).data().to_vec();
                let mut d_w = vec![0.0; w.len()];
                for (k, &m) in items.iter().enumerate() {
                    let tm = self.tensor_of(m).clone();
                    d_w[k] = d_out.iter().zip(tm.data()).map(|(d, v)| d * v).sum();
                    let d_m: Vec<f64> = d_out.iter().map(|d| w[k] * d).collect();
                    self.add_grad(m, &d_m);
                }
                self.add_grad(*weights, &d_w);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            if a.cols() != b.rows() {
                return Err(Error::dim(
                    "matmul",
                    format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..k {
                    let aij = a.at2(i, j);
                    if aij == 0.0 {
                        continue;
                    }
                    let brow = b.row(j);
                    let out = &mut data[i * n..(i + 1) * n];
                    for c in 0..n {
                        out[c] += aij * brow[c];
                    }
                }
            }
            Tensor::matrix(m, n, data)
        }
        (2, 1) => {
            if a.cols() != b.numel() {
                return Err(Error::dim(
                    "matmul",
                    format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k) = (a.rows(), a.cols());
            let x = b.data();
            let mut data = vec![0.0; m];
            for i in 0..m {
                let row = a.row(i);
                let mut acc = 0.0;
                for j in 0..k {
                    acc += row[j] * x[j];
                }
                data[i] = acc;
            }
            Ok(Tensor::vector(data))
        }
        (ra, rb) => Err(Error::dim(
            "matmul",
            format!("unsupported ranks {ra} x {rb} (shapes {:?}, {:?})", a.shape(), b.shape()),
        )),
    }
}
