//! Residual gated graph convolution backbone.
//!
//! Each layer computes, for node `i` with neighbours `j`,
//!
//! ```text
//! x_i' = rho(x_i) + ReLU( W1 x_i + sum_j e_ij * gate_ij ⊙ (W2 x_j) )
//! gate_ij = sigmoid(W3 x_i + W4 x_j)
//! ```
//!
//! where `e_ij` is the retained edge weight and `rho` a learned projection
//! on the first layer (LDP width to channel width) and the identity after.
//! Dropout follows the activation at train time. A mean over nodes gives the
//! graph embedding, and a linear head maps it to two class logits.
//!
//! Several graphs are processed at once by stacking them into one
//! block-diagonal graph ([`GraphBatch`]).

mod train;

use std::sync::Arc;

use connex_autodiff::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{upper_index, ConnectomeGraph, LDP_WIDTH};
use crate::error::{CoreError, Result};
use crate::rng::StageRng;

pub use train::{fit, train_backbone, TrainConfig, TrainReport};

pub const NUM_CLASSES: usize = 2;

/// How gated messages arriving at a node are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain sum over neighbours.
    Sum,
    /// Sum divided by the receiving node's degree. Keeps activations from
    /// growing geometrically with depth on dense graphs.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneArch {
    pub layers: usize,
    pub channels: usize,
    pub input_dim: usize,
    pub aggregation: Aggregation,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            layers: 5,
            channels: 32,
            input_dim: LDP_WIDTH,
            aggregation: Aggregation::default(),
        }
    }
}

impl BackboneArch {
    /// Expected parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut out = vec![
            ("proj.w".to_string(), vec![self.input_dim, c]),
            ("proj.b".to_string(), vec![c]),
        ];
        for l in 0..self.layers {
            let din = if l == 0 { self.input_dim } else { c };
            for w in ["w1", "w2", "w3", "w4"] {
                out.push((format!("layer{l}.{w}"), vec![din, c]));
            }
        }
        out.push(("head.w".to_string(), vec![c, NUM_CLASSES]));
        out.push(("head.b".to_string(), vec![NUM_CLASSES]));
        out
    }
}

/// Backbone parameters plus a frozen flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    pub params: ParamStore,
    frozen: bool,
}

impl Backbone {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: BackboneArch, rng: &mut StageRng) -> Self {
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    glorot(&shape, rng)
                };
                (name, t)
            })
            .collect();
        Self {
            arch,
            params,
            frozen: false,
        }
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(arch: BackboneArch, params: ParamStore) -> Result<Self> {
        check_shapes(&arch.param_shapes(), &params)?;
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 over parameter names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.params)
    }
}

pub(crate) fn check_shapes(expected: &[(String, Vec<usize>)], params: &ParamStore) -> Result<()> {
    if params.len() != expected.len() {
        return Err(CoreError::Config(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, shape) in expected {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(CoreError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(CoreError::Config(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

pub fn fingerprint(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn glorot(shape: &[usize], rng: &mut StageRng) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("shape")
}

/// How parameters enter a graph: as differentiable named inputs or as
/// constants that never receive gradients.
#[derive(Clone, Copy)]
pub struct ParamView<'a> {
    store: &'a ParamStore,
    trainable: bool,
}

impl<'a> ParamView<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn node(&self, g: &mut Graph, name: &str) -> NodeId {
        if self.trainable {
            g.input(name)
        } else {
            let t = self
                .store
                .get(name)
                .unwrap_or_else(|| panic!("parameter {name} missing from store"))
                .clone();
            g.constant(t)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

/// Node/edge index structure of a (possibly stacked) graph.
#[derive(Debug, Clone)]
pub struct Topology {
    pub num_nodes: usize,
    /// Message source `j` of each edge `(i, j)`.
    pub src: Arc<[usize]>,
    /// Receiving node `i` of each edge `(i, j)`.
    pub dst: Arc<[usize]>,
    /// `1 / deg(i)` for each edge, `[E, 1]`.
    pub inv_degree: Tensor,
}

impl Topology {
    pub fn new(num_nodes: usize, src: Arc<[usize]>, dst: Arc<[usize]>) -> Self {
        let mut deg = vec![0usize; num_nodes];
        for &d in dst.iter() {
            deg[d] += 1;
        }
        let inv: Vec<f64> = dst.iter().map(|&d| 1.0 / deg[d] as f64).collect();
        let inv_degree = Tensor::new(vec![inv.len(), 1], inv).expect("edge count");
        Self {
            num_nodes,
            src,
            dst,
            inv_degree,
        }
    }
}

/// Several connectome graphs stacked block-diagonally.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    pub topology: Topology,
    /// `[num_graphs * M, input_dim]`.
    pub features: Tensor,
    /// Retained edge weights, `[E, 1]`.
    pub weights: Tensor,
    /// Upper-triangle position of each edge's node pair, for mask lookup.
    pub pair_index: Arc<[usize]>,
    /// Graph index of each stacked node.
    pub graph_of_node: Arc<[usize]>,
}

impl GraphBatch {
    pub fn new(graphs: &[&ConnectomeGraph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| CoreError::Parameter("empty graph batch".into()))?;
        let m = first.num_nodes;
        let mut feats = Vec::with_capacity(graphs.len() * m * LDP_WIDTH);
        let (mut src, mut dst, mut w, mut pair) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut graph_of_node = Vec::with_capacity(graphs.len() * m);
        for (b, gr) in graphs.iter().enumerate() {
            if gr.num_nodes != m || gr.node_features.len() != m {
                return Err(CoreError::Parameter(format!(
                    "graph {b} has {} nodes / {} feature rows, batch expects {m}",
                    gr.num_nodes,
                    gr.node_features.len()
                )));
            }
            let off = b * m;
            for f in &gr.node_features {
                feats.extend_from_slice(f);
            }
            for (&(i, j), &e) in gr.edges.iter().zip(&gr.edge_weights) {
                dst.push(off + i);
                src.push(off + j);
                w.push(e);
                pair.push(upper_index(m, i, j));
            }
            graph_of_node.extend(std::iter::repeat(b).take(m));
        }
        let n_edges = w.len().max(1);
        if w.is_empty() {
            // keep tensors non-empty; a zero-weight self-edge sends no message
            src.push(0);
            dst.push(0);
            w.push(0.0);
            pair.push(0);
        }
        Ok(Self {
            num_graphs: graphs.len(),
            nodes_per_graph: m,
            topology: Topology::new(graphs.len() * m, src.into(), dst.into()),
            features: Tensor::new(vec![graphs.len() * m, LDP_WIDTH], feats)?,
            weights: Tensor::new(vec![n_edges, 1], w)?,
            pair_index: pair.into(),
            graph_of_node: graph_of_node.into(),
        })
    }

    pub fn num_edges(&self) -> usize {
        self.weights.numel()
    }
}

/// Per-forward dropout settings; `None` means evaluation mode.
pub struct DropoutCtx<'r> {
    pub p: f64,
    pub rng: Option<&'r mut StageRng>,
}

impl DropoutCtx<'_> {
    pub fn eval() -> DropoutCtx<'static> {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub(crate) fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let seed = rng.gen();
                g.dropout(x, self.p, seed, true)
            }
            _ => x,
        }
    }
}

/// One residual gated graph convolution layer.
///
/// `edge_w` holds one weight per edge as an `[E, 1]` node.
pub fn rggcn_layer(
    g: &mut Graph,
    params: ParamView<'_>,
    arch: &BackboneArch,
    layer: usize,
    h: NodeId,
    topo: &Topology,
    edge_w: NodeId,
    drop: &mut DropoutCtx<'_>,
) -> NodeId {
    let name = |w: &str| format!("layer{layer}.{w}");
    let w1 = params.node(g, &name("w1"));
    let w2 = params.node(g, &name("w2"));
    let w3 = params.node(g, &name("w3"));
    let w4 = params.node(g, &name("w4"));

    let self_term = g.matmul(h, w1);
    let hw2 = g.matmul(h, w2);
    let hw3 = g.matmul(h, w3);
    let hw4 = g.matmul(h, w4);

    let gate_i = g.gather_rows(hw3, topo.dst.clone());
    let gate_j = g.gather_rows(hw4, topo.src.clone());
    let gate_pre = g.add(gate_i, gate_j);
    let gate = g.sigmoid(gate_pre);

    let edge_w = match arch.aggregation {
        Aggregation::Sum => edge_w,
        Aggregation::Mean => {
            let inv = g.constant(topo.inv_degree.clone());
            g.mul(edge_w, inv)
        }
    };
    let ones = g.constant(Tensor::ones(&[1, arch.channels]));
    let e_full = g.matmul(edge_w, ones);
    let msg_j = g.gather_rows(hw2, topo.src.clone());
    let gated = g.mul(msg_j, gate);
    let msg = g.mul(gated, e_full);
    let agg = g.scatter_sum(msg, topo.dst.clone(), topo.num_nodes);

    let pre = g.add(self_term, agg);
    let act = g.relu(pre);
    let act = drop.apply(g, act);

    let residual = if layer == 0 {
        let pw = params.node(g, "proj.w");
        let pb = params.node(g, "proj.b");
        let p = g.matmul(h, pw);
        g.add_row_bias(p, pb)
    } else {
        h
    };
    g.add(residual, act)
}

/// Graph nodes produced by [`backbone_forward`].
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutputs {
    /// `[num_graphs, channels]` mean-pooled node features.
    pub embedding: NodeId,
    /// `[num_graphs, 2]`.
    pub logits: NodeId,
}

/// Runs every layer, pools, and applies the head.
pub fn backbone_forward(
    g: &mut Graph,
    params: ParamView<'_>,
    arch: &BackboneArch,
    batch: &GraphBatch,
    edge_w: NodeId,
    drop: &mut DropoutCtx<'_>,
) -> BackboneOutputs {
    let mut h = g.constant(batch.features.clone());
    for l in 0..arch.layers {
        h = rggcn_layer(g, params, arch, l, h, &batch.topology, edge_w, drop);
    }
    let pooled = g.scatter_sum(h, batch.graph_of_node.clone(), batch.num_graphs);
    let embedding = g.scale(pooled, 1.0 / batch.nodes_per_graph as f64);
    let hw = params.node(g, "head.w");
    let hb = params.node(g, "head.b");
    let z = g.matmul(embedding, hw);
    let logits = g.add_row_bias(z, hb);
    BackboneOutputs { embedding, logits }
}

/// Evaluation-mode embeddings and logits for a list of graphs.
pub fn evaluate(backbone: &Backbone, graphs: &[&ConnectomeGraph]) -> Result<(Tensor, Tensor)> {
    const CHUNK: usize = 64;
    let c = backbone.arch.channels;
    let mut emb = Vec::with_capacity(graphs.len() * c);
    let mut logits = Vec::with_capacity(graphs.len() * NUM_CLASSES);
    for chunk in graphs.chunks(CHUNK) {
        let batch = GraphBatch::new(chunk)?;
        let mut g = Graph::new();
        let w = g.constant(batch.weights.clone());
        let out = backbone_forward(
            &mut g,
            ParamView::frozen(&backbone.params),
            &backbone.arch,
            &batch,
            w,
            &mut DropoutCtx::eval(),
        );
        let bind = ParamStore::new();
        g.forward(out.logits, &bind)?;
        emb.extend_from_slice(g.value(out.embedding).expect("evaluated").values());
        logits.extend_from_slice(g.value(out.logits).expect("evaluated").values());
    }
    let n = graphs.len().max(1);
    Ok((
        Tensor::new(vec![n, c], emb)?,
        Tensor::new(vec![n, NUM_CLASSES], logits)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_graph, ConnectomeMatrix, LdpNeighborhood};
    use crate::rng::substream;
    use connex_autodiff::grad_check_fn;

    fn tiny_arch() -> BackboneArch {
        BackboneArch {
            layers: 1,
            channels: 1,
            input_dim: 1,
            aggregation: Aggregation::Sum,
        }
    }

    fn layer_eval(
        params: &ParamStore,
        arch: &BackboneArch,
        x: Tensor,
        edges: &[(usize, usize)],
        weights: &[f64],
    ) -> Tensor {
        let topo = Topology::new(
            x.shape()[0],
            edges.iter().map(|e| e.1).collect(),
            edges.iter().map(|e| e.0).collect(),
        );
        let mut g = Graph::new();
        let h = g.constant(x);
        let w = g.constant(Tensor::new(vec![weights.len(), 1], weights.to_vec()).unwrap());
        let out = rggcn_layer(&mut g, ParamView::frozen(params), arch, 0, h, &topo, w, &mut DropoutCtx::eval());
        g.forward(out, &ParamStore::new()).unwrap().clone()
    }

    fn tiny_params(w1: f64, w2: f64) -> ParamStore {
        let mut p = ParamStore::new();
        let s = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        p.insert("proj.w", s(1.0));
        p.insert("proj.b", Tensor::zeros(&[1]));
        p.insert("layer0.w1", s(w1));
        p.insert("layer0.w2", s(w2));
        p.insert("layer0.w3", s(0.0));
        p.insert("layer0.w4", s(0.0));
        p
    }

    #[test]
    fn two_node_hand_example() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        let out = layer_eval(&tiny_params(0.0, 1.0), &tiny_arch(), x, &[(0, 1), (1, 0)], &[1.0, 1.0]);
        assert_eq!(out.values(), &[2.0, 2.5]);
    }

    #[test]
    fn zero_message_and_self_weights_pass_residual_through() {
        let x = Tensor::from_rows(&[vec![1.5], vec![-2.0], vec![0.25]]);
        let out = layer_eval(&tiny_params(0.0, 0.0), &tiny_arch(), x.clone(), &[(0, 1), (1, 0)], &[0.7, 0.7]);
        assert_eq!(out, x);
    }

    #[test]
    fn isolated_node_gets_only_self_term() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let out = layer_eval(&tiny_params(0.5, 1.0), &tiny_arch(), x, &[(0, 1), (1, 0)], &[1.0, 1.0]);
        // node 2: 3 + relu(0.5 * 3)
        assert_eq!(out.values()[2], 4.5);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let arch = BackboneArch {
            layers: 1,
            channels: 4,
            input_dim: 5,
            ..Default::default()
        };
        let b = Backbone::init(arch, &mut substream(0, &["t"]));
        let topo = Topology::new(2, vec![1, 0].into(), vec![0, 1].into());
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::ones(&[2, 1]));
        let out = rggcn_layer(&mut g, ParamView::frozen(&b.params), &arch, 0, h, &topo, w, &mut DropoutCtx::eval());
        assert!(g.forward(out, &ParamStore::new()).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let arch = BackboneArch {
            layers: 2,
            channels: 3,
            input_dim: 2,
            aggregation: Aggregation::Sum,
        };
        let mut rng = substream(3, &["gc"]);
        let b = Backbone::init(arch, &mut rng);
        let edges = [(0usize, 1usize), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)];
        let topo = Topology::new(
            3,
            edges.iter().map(|e| e.1).collect(),
            edges.iter().map(|e| e.0).collect(),
        );
        let mut bind = b.params.clone();
        bind.insert("x", Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        bind.insert("e", Tensor::new(vec![6, 1], (0..6).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap());
        let report = grad_check_fn(
            |g| {
                let x = g.input("x");
                let e = g.input("e");
                let h = rggcn_layer(g, ParamView::trainable(&ParamStore::new()), &arch, 0, x, &topo, e, &mut DropoutCtx::eval());
                rggcn_layer(g, ParamView::trainable(&ParamStore::new()), &arch, 1, h, &topo, e, &mut DropoutCtx::eval())
            },
            &bind,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn random_graph(seed: u64, m: usize) -> ConnectomeGraph {
        let mut rng = substream(seed, &["graph"]);
        let mut e = ConnectomeMatrix::zeros(m);
        for i in 0..m {
            for j in i + 1..m {
                e.set_sym(i, j, rng.gen_range(0.0..1.0));
            }
        }
        build_graph(&e, 3, LdpNeighborhood::OneHop).unwrap()
    }

    #[test]
    fn embedding_and_logit_widths() {
        let b = Backbone::init(BackboneArch::default(), &mut substream(0, &["init"]));
        let gr = random_graph(1, 10);
        let (emb, logits) = evaluate(&b, &[&gr, &gr]).unwrap();
        assert_eq!(emb.shape(), &[2, 32]);
        assert_eq!(logits.shape(), &[2, 2]);
    }

    #[test]
    fn embedding_is_invariant_to_node_permutation() {
        let b = Backbone::init(BackboneArch::default(), &mut substream(0, &["init"]));
        let m = 12;
        let gr = random_graph(4, m);
        let perm: Vec<usize> = (0..m).map(|i| (i * 5 + 3) % m).collect();
        let mut pg = gr.clone();
        let mut pairs: Vec<((usize, usize), f64)> = gr
            .edges
            .iter()
            .zip(&gr.edge_weights)
            .map(|(&(i, j), &w)| ((perm[i], perm[j]), w))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        pg.edges = pairs.iter().map(|p| p.0).collect();
        pg.edge_weights = pairs.iter().map(|p| p.1).collect();
        for i in 0..m {
            pg.node_features[perm[i]] = gr.node_features[i];
        }
        let (a, _) = evaluate(&b, &[&gr]).unwrap();
        let (c, _) = evaluate(&b, &[&pg]).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-9);
    }

    #[test]
    fn identical_rows_with_zero_messages_embed_to_projection() {
        let arch = BackboneArch {
            layers: 2,
            channels: 4,
            input_dim: LDP_WIDTH,
            ..Default::default()
        };
        let mut b = Backbone::init(arch, &mut substream(2, &["init"]));
        for l in 0..2 {
            for w in ["w1", "w2"] {
                let shape = b.params.get(&format!("layer{l}.{w}")).unwrap().shape().to_vec();
                b.params.insert(format!("layer{l}.{w}"), Tensor::zeros(&shape));
            }
        }
        let mut gr = random_graph(5, 6);
        for f in gr.node_features.iter_mut() {
            *f = [2.0, 1.0, 0.5, 0.0, 3.0];
        }
        let (emb, _) = evaluate(&b, &[&gr]).unwrap();
        let row = Tensor::new(vec![1, LDP_WIDTH], vec![2.0, 1.0, 0.5, 0.0, 3.0]).unwrap();
        let proj = row.matmul(b.params.get("proj.w").unwrap()).unwrap();
        assert!(emb.max_abs_diff(&proj) < 1e-12);
    }
}
