//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so parents always precede
//! their children and the node list is already a topological order.
//! [`Graph::forward`] evaluates every node up to a root and caches the
//! values; [`Graph::backward`] then walks the list in reverse, accumulating
//! adjoints for every named input.
//!
//! Broadcasting is limited to scalar-with-tensor (`add`, `sub`, `mul` when
//! the right operand has one element) and row-vector bias addition
//! ([`Graph::add_row_bias`]). Anything else has to be expressed with an
//! explicit reshape, matmul or gather.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// sqrt(2 / pi), used by the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId, Vec<usize>),
    Mean {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        affine: Option<(NodeId, NodeId)>,
        eps: f64,
    },
    Dropout {
        x: NodeId,
        p: f64,
        seed: u64,
        train: bool,
    },
    GatherRows {
        x: NodeId,
        index: Arc<[usize]>,
    },
    ScatterAddRows {
        x: NodeId,
        index: Arc<[usize]>,
        rows: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Tensor,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Mean { .. } => "mean",
            Op::Sum(_) => "sum",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, affine, .. } => match affine {
                Some((g, b)) => vec![*x, *g, *b],
                None => vec![*x],
            },
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Reshape(x, _)
            | Op::Sum(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softplus(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::Slice { x, .. }
            | Op::Mean { x, .. }
            | Op::Dropout { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
    value: Option<Tensor>,
    /// Per-op forward cache (dropout mask, normalized activations, ...).
    aux: Vec<f64>,
}

/// A computation graph over [`Tensor`] values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    evaluated: usize,
    bound: Vec<(String, Vec<usize>)>,
    kink_margin: f64,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            kink_margin: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Input(_) => true,
            Op::Const(_) => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            requires_grad,
            value: None,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A named, differentiable leaf resolved from the bindings at forward
    /// time. Requesting the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        self.push(Op::BatchMatMul { a, b, transpose_b })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
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

    /// `x[.., j] + bias[j]` for a bias of length equal to the last axis.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice {
            x,
            axis,
            start,
            len,
        })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    /// Mean over one axis; the axis is dropped from the output shape.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Mean { x, axis })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// GELU, tanh form:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    /// Layer normalization over the last axis, with optional elementwise
    /// gain and bias of the last-axis width.
    pub fn layer_norm(&mut self, x: NodeId, affine: Option<(NodeId, NodeId)>, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, affine, eps })
    }

    /// Inverted dropout: at train time each entry is kept with probability
    /// `1 - p` and scaled by `1 / (1 - p)`; identity otherwise.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64, train: bool) -> NodeId {
        self.push(Op::Dropout { x, p, seed, train })
    }

    /// `out[r] = x[index[r]]` over rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: NodeId, index: Arc<[usize]>) -> NodeId {
        self.push(Op::GatherRows { x, index })
    }

    /// `out[index[r]] += x[r]` into a `[rows, c]` zero tensor.
    pub fn scatter_sum(&mut self, x: NodeId, index: Arc<[usize]>, rows: usize) -> NodeId {
        self.push(Op::ScatterAddRows { x, index, rows })
    }

    /// Weighted mean cross-entropy of `logits: [n, k]` against soft
    /// targets `[n, k]`; rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Tensor, weights: Vec<f64>) -> NodeId {
        self.push(Op::CrossEntropy {
            logits,
            targets,
            weights,
        })
    }

    /// Cross-entropy against hard class labels, all rows weighted equally.
    pub fn cross_entropy_labels(&mut self, logits: NodeId, labels: &[usize], classes: usize) -> NodeId {
        let n = labels.len();
        let mut t = vec![0.0; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            t[i * classes + l] = 1.0;
        }
        let targets = Tensor::new(vec![n, classes], t).expect("label tensor");
        self.cross_entropy(logits, targets, vec![1.0; n])
    }

    /// Value cached by the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Smallest distance of any ReLU input to its kink seen in the last
    /// forward pass; infinite when the graph has no ReLU.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Evaluates every node up to and including `root`.
    pub fn forward(&mut self, root: NodeId, bindings: &ParamStore) -> Result<&Tensor> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::State(format!("unknown node {}", root.0)));
        }
        self.bound = bindings
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect();
        self.kink_margin = f64::INFINITY;
        self.evaluated = 0;
        for i in 0..=root.0 {
            let (value, aux) = self.eval_node(i, bindings)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
            self.nodes[i].aux = aux;
            self.evaluated = i + 1;
        }
        Ok(self.nodes[root.0].value.as_ref().expect("just evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("parent evaluated")
    }

    fn eval_node(&mut self, i: usize, bindings: &ParamStore) -> Result<(Tensor, Vec<f64>)> {
        let op = self.nodes[i].op.clone();
        let name = op.name();
        let out = match &op {
            Op::Input(n) => bindings
                .get(n)
                .cloned()
                .ok_or_else(|| AutodiffError::Unbound(n.clone()))?,
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b))?,
            Op::BatchMatMul { a, b, transpose_b } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (bs, m, k, n) = bmm_dims(a, b, *transpose_b)?;
                let mut out = vec![0.0; bs * m * n];
                for t in 0..bs {
                    let av = &a.values()[t * m * k..(t + 1) * m * k];
                    let bv = &b.values()[t * k * n..(t + 1) * k * n];
                    let ov = &mut out[t * m * n..(t + 1) * m * n];
                    if *transpose_b {
                        matmul_nt_into(av, bv, ov, m, k, n);
                    } else {
                        matmul_into(av, bv, ov, m, k, n);
                    }
                }
                Tensor::new(vec![bs, m, n], out)?
            }
            Op::Transpose(x) => {
                let x = self.val(*x);
                if x.rank() != 2 {
                    return Err(AutodiffError::shape(name, format!("rank 2 expected, got {:?}", x.shape())));
                }
                x.transposed()
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                if a.shape() == b.shape() {
                    a.zip_map(b, f)
                } else if b.numel() == 1 {
                    let s = b.item();
                    a.map(|x| f(x, s))
                } else {
                    return Err(AutodiffError::shape(
                        name,
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
            }
            Op::AddRowBias(x, bias) => {
                let (x, bias) = (self.val(*x), self.val(*bias));
                let c = x.last_dim();
                if bias.numel() != c {
                    return Err(AutodiffError::shape(
                        name,
                        format!("bias of {} for last axis {c}", bias.numel()),
                    ));
                }
                let mut out = x.clone();
                for row in out.values_mut().chunks_mut(c) {
                    for (o, b) in row.iter_mut().zip(bias.values()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(x, c) => self.val(*x).map(|v| v * c),
            Op::Concat(xs, axis) => {
                let parts: Vec<&Tensor> = xs.iter().map(|x| self.val(*x)).collect();
                concat_values(&parts, *axis)?
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let x = self.val(*x);
                let (outer, extent, inner) = split_axis(x.shape(), *axis, name)?;
                if *len == 0 || start + len > extent {
                    return Err(AutodiffError::shape(
                        name,
                        format!("[{start}, {}) outside axis of {extent}", start + len),
                    ));
                }
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    out.extend_from_slice(&x.values()[base..base + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                Tensor::new(shape, out)?
            }
            Op::Reshape(x, shape) => self.val(*x).clone().reshaped(shape.clone())?,
            Op::Mean { x, axis } => {
                let x = self.val(*x);
                let (outer, extent, inner) = split_axis(x.shape(), *axis, name)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..extent {
                        let src = &x.values()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                let inv = 1.0 / extent as f64;
                out.iter_mut().for_each(|v| *v *= inv);
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::new(shape, out)?
            }
            Op::Sum(x) => Tensor::scalar(self.val(*x).values().iter().sum()),
            Op::Sigmoid(x) => self.val(*x).map(sigmoid),
            Op::Relu(x) => {
                let xv = self.val(*x);
                let margin = xv.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                let out = xv.map(|v| v.max(0.0));
                self.kink_margin = self.kink_margin.min(margin);
                out
            }
            Op::Gelu(x) => self.val(*x).map(gelu),
            Op::Softplus(x) => self.val(*x).map(softplus),
            Op::Log(x) => {
                let x = self.val(*x);
                if x.values().iter().any(|&v| v <= 0.0) {
                    return Err(AutodiffError::NonFinite { op: name });
                }
                x.map(f64::ln)
            }
            Op::Softmax(x) => {
                let x = self.val(*x);
                let c = x.last_dim();
                let mut out = x.clone();
                for row in out.values_mut().chunks_mut(c) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LayerNorm { x, affine, eps } => {
                let xv = self.val(*x);
                let c = xv.last_dim();
                let (gain, bias) = match affine {
                    Some((g, b)) => {
                        let (g, b) = (self.val(*g), self.val(*b));
                        if g.numel() != c || b.numel() != c {
                            return Err(AutodiffError::shape(
                                name,
                                format!("affine of {}/{} for last axis {c}", g.numel(), b.numel()),
                            ));
                        }
                        (Some(g.values().to_vec()), Some(b.values().to_vec()))
                    }
                    None => (None, None),
                };
                let rows = xv.numel() / c;
                // aux: normalized values followed by one inverse std per row
                let mut aux = vec![0.0; xv.numel() + rows];
                let mut out = xv.clone();
                for (r, row) in out.values_mut().chunks_mut(c).enumerate() {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    aux[xv.numel() + r] = inv;
                    for (j, v) in row.iter_mut().enumerate() {
                        let xhat = (*v - mean) * inv;
                        aux[r * c + j] = xhat;
                        *v = match (&gain, &bias) {
                            (Some(g), Some(b)) => xhat * g[j] + b[j],
                            _ => xhat,
                        };
                    }
                }
                return Ok((out, aux));
            }
            Op::Dropout { x, p, seed, train } => {
                if !(0.0..1.0).contains(p) {
                    return Err(AutodiffError::argument(name, format!("p = {p}")));
                }
                let x = self.val(*x);
                if !*train || *p == 0.0 {
                    x.clone()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..x.numel())
                        .map(|_| if rng.gen::<f64>() >= *p { keep } else { 0.0 })
                        .collect();
                    let out = Tensor::new(
                        x.shape().to_vec(),
                        x.values().iter().zip(&mask).map(|(a, m)| a * m).collect(),
                    )?;
                    return Ok((out, mask));
                }
            }
            Op::GatherRows { x, index } => {
                let x = self.val(*x);
                let (r, c) = x
                    .dims2()
                    .ok_or_else(|| AutodiffError::shape(name, "rank 2 expected"))?;
                let mut out = Vec::with_capacity(index.len() * c);
                for &ix in index.iter() {
                    if ix >= r {
                        return Err(AutodiffError::shape(name, format!("row {ix} of {r}")));
                    }
                    out.extend_from_slice(x.row(ix));
                }
                Tensor::new(vec![index.len(), c], out)?
            }
            Op::ScatterAddRows { x, index, rows } => {
                let x = self.val(*x);
                let (r, c) = x
                    .dims2()
                    .ok_or_else(|| AutodiffError::shape(name, "rank 2 expected"))?;
                if index.len() != r {
                    return Err(AutodiffError::shape(
                        name,
                        format!("{} indices for {r} rows", index.len()),
                    ));
                }
                let mut out = vec![0.0; rows * c];
                for (src, &dst) in index.iter().enumerate() {
                    if dst >= *rows {
                        return Err(AutodiffError::shape(name, format!("target row {dst} of {rows}")));
                    }
                    for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(x.row(src)) {
                        *o += v;
                    }
                }
                Tensor::new(vec![*rows, c], out)?
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let z = self.val(*logits);
                if z.rank() != 2 || z.shape() != targets.shape() || weights.len() != z.shape()[0] {
                    return Err(AutodiffError::shape(
                        name,
                        format!(
                            "logits {:?}, targets {:?}, {} weights",
                            z.shape(),
                            targets.shape(),
                            weights.len()
                        ),
                    ));
                }
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return Err(AutodiffError::argument(name, "row weights sum to zero"));
                }
                let k = z.last_dim();
                let mut probs = z.values().to_vec();
                let mut loss = 0.0;
                for (r, row) in probs.chunks_mut(k).enumerate() {
                    let lse = log_sum_exp(row);
                    let t = targets.row(r);
                    let mut row_loss = 0.0;
                    for (j, v) in row.iter_mut().enumerate() {
                        row_loss -= t[j] * (*v - lse);
                        *v = (*v - lse).exp();
                    }
                    loss += weights[r] * row_loss;
                }
                return Ok((Tensor::scalar(loss / wsum), probs));
            }
        };
        Ok((out, Vec::new()))
    }

    /// Gradients of the scalar `root` with respect to every bound input.
    ///
    /// Inputs that were bound at forward time but do not influence `root`
    /// receive zero tensors of their bound shape.
    pub fn backward(&self, root: NodeId) -> Result<ParamStore> {
        if root.0 >= self.evaluated {
            return Err(AutodiffError::State(
                "backward called before forward reached the root".into(),
            ));
        }
        let root_val = self.val(root);
        if root_val.numel() != 1 {
            return Err(AutodiffError::State(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(root_val.shape()));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Input(_) = node.op {
                adj[i] = Some(g);
                continue;
            }
            for (parent, grad) in self.vjp(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }

        let mut grads = ParamStore::new();
        for (name, shape) in &self.bound {
            let g = self
                .inputs
                .get(name)
                .filter(|id| id.0 <= root.0)
                .and_then(|id| adj[id.0].clone())
                .unwrap_or_else(|| Tensor::zeros(shape));
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `i` for each parent.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let out = node.value.as_ref().expect("evaluated");
        let needs = |p: &NodeId| self.nodes[p.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Input(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims2().expect("checked");
                let n = bv.last_dim();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g.values(), bv.values(), &mut da, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(av.values(), g.values(), &mut db, k, m, n);
                    res.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (bs, m, k, n) = bmm_dims(av, bv, *transpose_b)?;
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for t in 0..bs {
                    let gs = &g.values()[t * m * n..(t + 1) * m * n];
                    let a_s = &av.values()[t * m * k..(t + 1) * m * k];
                    let b_s = &bv.values()[t * k * n..(t + 1) * k * n];
                    let da_s = &mut da[t * m * k..(t + 1) * m * k];
                    let db_s = &mut db[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        // out = A B^T with B: [n, k]
                        matmul_into(gs, b_s, da_s, m, n, k);
                        matmul_tn_into(gs, a_s, db_s, n, m, k);
                    } else {
                        matmul_nt_into(gs, b_s, da_s, m, n, k);
                        matmul_tn_into(a_s, gs, db_s, k, m, n);
                    }
                }
                if needs(a) {
                    res.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if needs(b) {
                    res.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Transpose(x) => res.push((*x, g.transposed())),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let scalar_b = av.shape() != bv.shape();
                let (ga, gb) = match node.op {
                    Op::Add(..) => (g.clone(), g.clone()),
                    Op::Sub(..) => (g.clone(), g.map(|v| -v)),
                    _ => {
                        if scalar_b {
                            let s = bv.item();
                            (g.map(|v| v * s), g.zip_map(av, |x, y| x * y))
                        } else {
                            (g.zip_map(bv, |x, y| x * y), g.zip_map(av, |x, y| x * y))
                        }
                    }
                };
                if needs(a) {
                    res.push((*a, ga));
                }
                if needs(b) {
                    let gb = if scalar_b {
                        Tensor::new(bv.shape().to_vec(), vec![gb.values().iter().sum()])?
                    } else {
                        gb
                    };
                    res.push((*b, gb));
                }
            }
            Op::AddRowBias(x, bias) => {
                if needs(x) {
                    res.push((*x, g.clone()));
                }
                if needs(bias) {
                    let bv = self.val(*bias);
                    let c = bv.numel();
                    let mut db = vec![0.0; c];
                    for row in g.values().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*bias, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * c))),
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for x in xs {
                    let xv = self.val(*x);
                    let len = xv.shape()[*axis];
                    if needs(x) {
                        res.push((*x, slice_values(g, *axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let xv = self.val(*x);
                let (outer, extent, inner) = split_axis(xv.shape(), *axis, "slice")?;
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    let src = &g.values()[o * len * inner..(o + 1) * len * inner];
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Reshape(x, _) => {
                let shape = self.val(*x).shape().to_vec();
                res.push((*x, g.clone().reshaped(shape)?));
            }
            Op::Mean { x, axis } => {
                let xv = self.val(*x);
                let (outer, extent, inner) = split_axis(xv.shape(), *axis, "mean")?;
                let inv = 1.0 / extent as f64;
                let mut dx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let src = &g.values()[o * inner..(o + 1) * inner];
                    for a in 0..extent {
                        let dst = &mut dx[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                res.push((*x, Tensor::full(xv.shape(), g.item())));
            }
            Op::Sigmoid(x) => res.push((*x, g.zip_map(out, |g, s| g * s * (1.0 - s)))),
            Op::Relu(x) => {
                let xv = self.val(*x);
                res.push((*x, g.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 })));
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                res.push((*x, g.zip_map(xv, |g, v| g * gelu_grad(v))));
            }
            Op::Softplus(x) => {
                let xv = self.val(*x);
                res.push((*x, g.zip_map(xv, |g, v| g * sigmoid(v))));
            }
            Op::Log(x) => {
                let xv = self.val(*x);
                res.push((*x, g.zip_map(xv, |g, v| g / v)));
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let mut dx = vec![0.0; out.numel()];
                for ((d, y), gr) in dx
                    .chunks_mut(c)
                    .zip(out.values().chunks(c))
                    .zip(g.values().chunks(c))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), dx)?));
            }
            Op::LayerNorm { x, affine, .. } => {
                let c = out.last_dim();
                let n = out.numel();
                let rows = n / c;
                let xhat = &node.aux[..n];
                let inv = &node.aux[n..];
                let gain = affine.map(|(gn, _)| self.val(gn).values().to_vec());
                if let Some((gn, bn)) = affine {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g.values()[r * c + j] * xhat[r * c + j];
                            db[j] += g.values()[r * c + j];
                        }
                    }
                    if needs(gn) {
                        res.push((*gn, Tensor::new(self.val(*gn).shape().to_vec(), dg)?));
                    }
                    if needs(bn) {
                        res.push((*bn, Tensor::new(self.val(*bn).shape().to_vec(), db)?));
                    }
                }
                if needs(x) {
                    let mut dx = vec![0.0; n];
                    let cf = c as f64;
                    for r in 0..rows {
                        let gr: Vec<f64> = (0..c)
                            .map(|j| {
                                let v = g.values()[r * c + j];
                                gain.as_ref().map_or(v, |gn| v * gn[j])
                            })
                            .collect();
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mean_g = gr.iter().sum::<f64>() / cf;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for j in 0..c {
                            dx[r * c + j] = inv[r] * (gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    res.push((*x, Tensor::new(out.shape().to_vec(), dx)?));
                }
            }
            Op::Dropout { x, .. } => {
                if node.aux.is_empty() {
                    res.push((*x, g.clone()));
                } else {
                    let dx = g.values().iter().zip(&node.aux).map(|(a, m)| a * m).collect();
                    res.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.val(*x);
                let c = xv.last_dim();
                let mut dx = vec![0.0; xv.numel()];
                for (r, &ix) in index.iter().enumerate() {
                    for (d, v) in dx[ix * c..(ix + 1) * c].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::ScatterAddRows { x, index, .. } => {
                let xv = self.val(*x);
                let c = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.numel());
                for &ix in index.iter() {
                    dx.extend_from_slice(&g.values()[ix * c..(ix + 1) * c]);
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let z = self.val(*logits);
                let k = z.last_dim();
                let wsum: f64 = weights.iter().sum();
                let scale = g.item() / wsum;
                let probs = &node.aux;
                let mut dz = vec![0.0; z.numel()];
                for r in 0..z.shape()[0] {
                    let t = targets.row(r);
                    let tsum: f64 = t.iter().sum();
                    for j in 0..k {
                        dz[r * k + j] = scale * weights[r] * (probs[r * k + j] * tsum - t[j]);
                    }
                }
                res.push((*logits, Tensor::new(z.shape().to_vec(), dz)?));
            }
        }
        Ok(res)
    }
}

fn bmm_dims(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<(usize, usize, usize, usize)> {
    let (&[ba, m, k], &[bb, b1, b2]) = (a.shape(), b.shape()) else {
        return Err(AutodiffError::shape(
            "batch_matmul",
            format!("rank 3 operands expected, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    };
    let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
    if ba != bb || k != kb {
        return Err(AutodiffError::shape(
            "batch_matmul",
            format!("{:?} x {:?} (transpose_b = {transpose_b})", a.shape(), b.shape()),
        ));
    }
    Ok((ba, m, k, n))
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AutodiffError::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn concat_values(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| AutodiffError::shape("concat", "no operands"))?;
    let rank = first.rank();
    let (outer, _, inner) = split_axis(first.shape(), axis, "concat")?;
    let mut total = 0;
    for p in parts {
        let same = p.rank() == rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same {
            return Err(AutodiffError::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", first.shape(), p.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.values()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn slice_values(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, extent, inner) = split_axis(t.shape(), axis, "slice")?;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&t.values()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> ParamStore {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let b = bind(&[("x", Tensor::scalar(0.0))]);
        assert_eq!(g.forward(s, &b).unwrap().item(), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 0.25);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.forward(y, &ParamStore::new()).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![7.0, 0.0]]);
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let xi = g.input("x");
        let y = g.matmul(i, xi);
        assert_eq!(g.forward(y, &bind(&[("x", x.clone())])).unwrap(), &x);
    }

    #[test]
    fn gelu_tanh_form_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * 1 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expect = 0.5 * (1.0 + (GELU_C * 1.044_715_f64).tanh());
        assert!((gelu(1.0) - expect).abs() < 1e-15);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_central_difference_at_zero() {
        let h = 1e-6;
        let fd = (gelu(h) - gelu(-h)) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-9, "fd = {fd}");
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.gelu(x);
        let s = g.sum(y);
        g.forward(s, &bind(&[("x", Tensor::scalar(0.0))])).unwrap();
        let d = g.backward(s).unwrap().get("x").unwrap().item();
        assert!((d - fd).abs() < 1e-9);
    }

    #[test]
    fn shape_errors_name_the_operator() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.matmul(a, b);
        match g.forward(c, &ParamStore::new()) {
            Err(AutodiffError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let l = g.log(a);
        assert!(matches!(
            g.forward(l, &ParamStore::new()),
            Err(AutodiffError::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(AutodiffError::State(_))));
    }

    #[test]
    fn unused_binding_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let _unused = g.input("w");
        let s = g.sum(x);
        let b = bind(&[("x", Tensor::ones(&[2])), ("w", Tensor::ones(&[3, 2])), ("z", Tensor::ones(&[4]))]);
        g.forward(s, &b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Tensor::zeros(&[3, 2]));
        assert_eq!(grads.get("z").unwrap(), &Tensor::zeros(&[4]));
        assert_eq!(grads.get("x").unwrap(), &Tensor::ones(&[2]));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_with_zero_gradient_along_ones() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.layer_norm(x, None, 1e-5);
        let w = g.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let p = g.mul(y, w);
        let s = g.sum(p);
        let b = bind(&[("x", Tensor::full(&[1, 4], 2.5))]);
        g.forward(s, &b).unwrap();
        assert!(g.value(y).unwrap().values().iter().all(|v| v.abs() < 1e-12));
        let grad = g.backward(s).unwrap().get("x").unwrap().clone();
        // shifting every entry by the same amount leaves layernorm unchanged
        let along_ones: f64 = grad.values().iter().sum();
        assert!(along_ones.abs() < 1e-9, "{along_ones}");
    }

    #[test]
    fn dropout_is_identity_at_eval_and_scaled_at_train() {
        let x = Tensor::ones(&[4, 50]);
        let mut g = Graph::new();
        let xi = g.input("x");
        let ev = g.dropout(xi, 0.6, 7, false);
        let tr = g.dropout(xi, 0.6, 7, true);
        let s = g.sum(tr);
        g.forward(s, &bind(&[("x", x.clone())])).unwrap();
        assert_eq!(g.value(ev).unwrap(), &x);
        let kept = 1.0 / 0.4;
        assert!(g
            .value(tr)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0 || (v - kept).abs() < 1e-12));
    }

    #[test]
    fn scatter_then_gather_round_trip() {
        let mut g = Graph::new();
        let x = g.input("x");
        let idx: Arc<[usize]> = vec![2, 0, 2].into();
        let s = g.scatter_sum(x, idx, 3);
        let b = bind(&[("x", Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]))]);
        let out = g.forward(s, &b).unwrap();
        assert_eq!(out.values(), &[2.0, 0.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy_labels(z, &[1], 2);
        let v = g.forward(l, &ParamStore::new()).unwrap().item();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_along_axis_one() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let c = g.concat(&[a, b], 1);
        let s = g.slice(c, 1, 1, 2);
        g.forward(s, &ParamStore::new()).unwrap();
        assert_eq!(g.value(c).unwrap().values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(g.value(s).unwrap().values(), &[2.0, 5.0, 4.0, 6.0]);
    }
}
