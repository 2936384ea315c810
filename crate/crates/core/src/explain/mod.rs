//! Globally shared edge masks: learning, application, fine-tuning on
//! masked graphs, and group-level connection rankings.

mod report;

use std::sync::Arc;

use connex_autodiff::{sigmoid, Adam, Graph, ParamStore, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backbone_forward, evaluate, fit, Backbone, DropoutCtx, GraphBatch, ParamView, TrainConfig,
    TrainReport,
};
use crate::data::{upper_index, upper_len, ConnectomeGraph, ConnectomeMatrix, Modality};
use crate::error::{CoreError, Result};
use crate::rng::StageRng;

pub use report::{top_connections, ExplanationReport, RankedEdge};

/// Logit pinned on the diagonal; `sigmoid(-30)` is about `1e-13`.
pub const DIAGONAL_LOGIT: f64 = -30.0;

const MASK_PARAM: &str = "mask.y";

/// Pre-sigmoid edge mask `Y`, shared by every subject of one modality.
///
/// Only the strict upper triangle is stored, so the mask is symmetric by
/// construction and the diagonal never changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEdgeMask {
    pub modality: Modality,
    size: usize,
    upper: Vec<f64>,
}

impl GlobalEdgeMask {
    pub fn constant(modality: Modality, size: usize, logit: f64) -> Self {
        Self {
            modality,
            size,
            upper: vec![logit; upper_len(size)],
        }
    }

    /// Upper-triangle logits drawn from `N(0, std)`.
    pub fn random(modality: Modality, size: usize, std: f64, rng: &mut StageRng) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| CoreError::Parameter(format!("mask init std {std}: {e}")))?;
        Ok(Self {
            modality,
            size,
            upper: (0..upper_len(size)).map(|_| normal.sample(rng)).collect(),
        })
    }

    /// Builds a mask from a full matrix of logits, which must be symmetric.
    /// The diagonal is ignored.
    pub fn from_matrix(modality: Modality, y: &ConnectomeMatrix) -> Result<Self> {
        let m = y.size();
        let mut upper = Vec::with_capacity(upper_len(m));
        for i in 0..m {
            for j in i + 1..m {
                let (a, b) = (y.get(i, j), y.get(j, i));
                if !a.is_finite() || a != b {
                    return Err(CoreError::Parameter(format!(
                        "mask logits at ({i}, {j}) are not finite and symmetric: {a} vs {b}"
                    )));
                }
                upper.push(a);
            }
        }
        Ok(Self {
            modality,
            size: m,
            upper,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn logit(&self, i: usize, j: usize) -> f64 {
        if i == j {
            DIAGONAL_LOGIT
        } else {
            self.upper[upper_index(self.size, i, j)]
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.logit(i, j))
    }

    /// Full `M x M` logit matrix with the pinned diagonal.
    pub fn to_matrix(&self) -> ConnectomeMatrix {
        let m = self.size;
        let mut out = ConnectomeMatrix::zeros(m);
        for i in 0..m {
            for j in 0..m {
                out.set(i, j, self.logit(i, j));
            }
        }
        out
    }

    /// Mean of `sigmoid(Y)` over off-diagonal pairs.
    pub fn mean_weight(&self) -> f64 {
        self.upper.iter().map(|&y| sigmoid(y)).sum::<f64>() / self.upper.len().max(1) as f64
    }
}

/// `E'[i, j] = E[i, j] * sigmoid(Y[i, j])`.
pub fn apply_mask(e: &ConnectomeMatrix, mask: &GlobalEdgeMask) -> Result<ConnectomeMatrix> {
    let m = e.size();
    if mask.size() != m {
        return Err(CoreError::Parameter(format!(
            "mask is {0}x{0}, matrix is {m}x{m}",
            mask.size()
        )));
    }
    let mut out = ConnectomeMatrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            out.set(i, j, e.get(i, j) * mask.weight(i, j));
        }
    }
    Ok(out)
}

/// Reweights the retained edges of an already sparsified graph. Topology
/// and node features are kept as they are.
pub fn mask_graph(graph: &ConnectomeGraph, mask: &GlobalEdgeMask) -> Result<ConnectomeGraph> {
    if mask.size() != graph.num_nodes {
        return Err(CoreError::Parameter(format!(
            "mask is {0}x{0}, graph has {1} nodes",
            mask.size(),
            graph.num_nodes
        )));
    }
    let mut out = graph.clone();
    for (w, &(i, j)) in out.edge_weights.iter_mut().zip(&graph.edges) {
        *w *= mask.weight(i, j);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the mean-mask sparsity penalty.
    pub lambda_sparsity: f64,
    /// Weight of the mean element-wise entropy penalty.
    pub lambda_entropy: f64,
    pub init_std: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
            lambda_sparsity: 0.005,
            lambda_entropy: 0.1,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub loss_trace: Vec<f64>,
}

/// Learns a mask under which the frozen backbone's predictions on masked
/// graphs agree with its predictions on the original graphs.
///
/// The objective is the soft-target cross-entropy between the two
/// prediction distributions, plus `lambda_sparsity * mean(sigmoid(Y))`
/// and `lambda_entropy * mean(H(sigmoid(Y)))` where `H` is the Bernoulli
/// entropy. Each step uses every graph.
pub fn learn_global_mask(
    graphs: &[&ConnectomeGraph],
    backbone: &Backbone,
    modality: Modality,
    config: &MaskConfig,
    rng: &mut StageRng,
) -> Result<(GlobalEdgeMask, MaskReport)> {
    if !backbone.is_frozen() {
        return Err(CoreError::Contract(
            "mask learning requires a frozen backbone".into(),
        ));
    }
    if graphs.is_empty() {
        return Err(CoreError::Parameter("no graphs to learn a mask from".into()));
    }
    let m = graphs[0].num_nodes;
    let mut mask = GlobalEdgeMask::random(modality, m, config.init_std, rng)?;
    if config.steps == 0 {
        return Ok((mask, MaskReport { loss_trace: vec![] }));
    }

    let (_, logits) = evaluate(backbone, graphs)?;
    let targets = softmax_rows(&logits);
    let batch = GraphBatch::new(graphs)?;
    let row_weights = vec![1.0; graphs.len()];
    let pair_index: Arc<[usize]> = batch.pair_index.clone();
    let u = upper_len(m);

    let mut params = ParamStore::new();
    params.insert(MASK_PARAM, Tensor::new(vec![u, 1], mask.upper.clone())?);
    let mut adam = Adam::new(config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);

    for _ in 0..config.steps {
        let mut g = Graph::new();
        let y = g.input(MASK_PARAM);
        let s = g.sigmoid(y);
        let per_edge = g.gather_rows(s, pair_index.clone());
        let raw = g.constant(batch.weights.clone());
        let w = g.mul(raw, per_edge);
        let out = backbone_forward(
            &mut g,
            ParamView::frozen(&backbone.params),
            &backbone.arch,
            &batch,
            w,
            &mut DropoutCtx::eval(),
        );
        let agree = g.cross_entropy(out.logits, targets.clone(), row_weights.clone());

        let sparsity = g.mean(s, 0);
        let sparsity = g.sum(sparsity);
        let sparsity = g.scale(sparsity, config.lambda_sparsity);
        // H(sigmoid(y)) = softplus(y) - y * sigmoid(y)
        let sp = g.softplus(y);
        let ys = g.mul(y, s);
        let h = g.sub(sp, ys);
        let entropy = g.mean(h, 0);
        let entropy = g.sum(entropy);
        let entropy = g.scale(entropy, config.lambda_entropy);

        let reg = g.add(sparsity, entropy);
        let loss = g.add(agree, reg);
        trace.push(g.forward(loss, &params)?.item());
        let grads = g.backward(loss)?;
        adam.step(&mut params, &grads);
    }
    mask.upper = params
        .remove(MASK_PARAM)
        .expect("mask parameter present")
        .into_values();
    Ok((mask, MaskReport { loss_trace: trace }))
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.last_dim();
    let mut out = logits.clone();
    for row in out.values_mut().chunks_mut(k) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Fine-tuning defaults: a lower learning rate than base training and a
/// fixed epoch budget.
pub fn finetune_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        learning_rate: 5e-4,
        patience: None,
        ..TrainConfig::default()
    }
}

/// Continues supervised training of `backbone` on the masked versions of
/// `graphs`. The caller's backbone is not modified; the tuned copy is
/// returned.
pub fn finetune_backbone(
    backbone: &Backbone,
    graphs: &[&ConnectomeGraph],
    labels: &[u8],
    mask: &GlobalEdgeMask,
    config: &TrainConfig,
    rng: &mut StageRng,
) -> Result<(Backbone, TrainReport)> {
    let masked = graphs
        .iter()
        .map(|g| mask_graph(g, mask))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ConnectomeGraph> = masked.iter().collect();
    let mut tuned = backbone.clone();
    tuned.unfreeze();
    let report = if config.epochs == 0 {
        TrainReport {
            loss_trace: vec![],
            stopped_early: false,
        }
    } else {
        fit(&mut tuned, &refs, labels, config, rng)?
    };
    Ok((tuned, report))
}

/// Embeddings of masked graphs under `backbone`, `[n, C]`.
pub fn masked_embeddings(
    backbone: &Backbone,
    graphs: &[&ConnectomeGraph],
    mask: &GlobalEdgeMask,
) -> Result<(Tensor, Tensor)> {
    let masked = graphs
        .iter()
        .map(|g| mask_graph(g, mask))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ConnectomeGraph> = masked.iter().collect();
    evaluate(backbone, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn matrix(m: usize, seed: u64) -> ConnectomeMatrix {
        use rand::Rng;
        let mut rng = substream(seed, &["m"]);
        let mut e = ConnectomeMatrix::zeros(m);
        for i in 0..m {
            for j in i + 1..m {
                e.set_sym(i, j, rng.gen_range(0.0..2.0));
            }
        }
        e
    }

    #[test]
    fn zero_mask_halves_every_entry() {
        let e = matrix(7, 1);
        let out = apply_mask(&e, &GlobalEdgeMask::constant(Modality::Sc, 7, 0.0)).unwrap();
        for (a, b) in out.values().iter().zip(e.values()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_masks() {
        let e = matrix(6, 2);
        let tol = 1e-12 * e.max_off_diagonal();
        let off = apply_mask(&e, &GlobalEdgeMask::constant(Modality::Sc, 6, -30.0)).unwrap();
        assert!(off.values().iter().all(|v| v.abs() <= tol));
        let on = apply_mask(&e, &GlobalEdgeMask::constant(Modality::Sc, 6, 30.0)).unwrap();
        for (a, b) in on.values().iter().zip(e.values()) {
            assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let e = matrix(5, 3);
        assert!(apply_mask(&e, &GlobalEdgeMask::constant(Modality::Fnc, 6, 0.0)).is_err());
    }

    #[test]
    fn masked_output_is_exactly_symmetric() {
        let e = matrix(9, 4);
        let mask = GlobalEdgeMask::random(Modality::Sc, 9, 2.0, &mut substream(0, &["y"])).unwrap();
        let out = apply_mask(&e, &mask).unwrap();
        assert_eq!(out.asymmetry(0.0), None);
        assert!(mask.upper().iter().all(|&y| {
            let s = sigmoid(y);
            s > 0.0 && s < 1.0
        }));
    }

    #[test]
    fn matrix_round_trip_keeps_logits() {
        let mask = GlobalEdgeMask::random(Modality::Fnc, 6, 1.0, &mut substream(9, &["y"])).unwrap();
        let y = mask.to_matrix();
        assert_eq!(y.get(2, 2), DIAGONAL_LOGIT);
        assert_eq!(GlobalEdgeMask::from_matrix(Modality::Fnc, &y).unwrap(), mask);
    }
}
