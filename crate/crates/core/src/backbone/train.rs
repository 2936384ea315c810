use connex_autodiff::{Adam, AutodiffError, Graph};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backbone_forward, Backbone, BackboneArch, DropoutCtx, GraphBatch, ParamView, NUM_CLASSES};
use crate::data::ConnectomeGraph;
use crate::error::{CoreError, Result};
use crate::rng::{substream, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Stop when the epoch loss has not improved by `min_delta` for this
    /// many epochs. `None` trains for the full budget.
    pub patience: Option<usize>,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-3,
            batch_size: 16,
            dropout: 0.6,
            patience: Some(30),
            min_delta: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub loss_trace: Vec<f64>,
    pub stopped_early: bool,
}

/// Initializes and trains a backbone on one modality's graphs.
pub fn train_backbone(
    graphs: &[&ConnectomeGraph],
    labels: &[u8],
    arch: BackboneArch,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Backbone, TrainReport)> {
    let mut backbone = Backbone::init(arch, &mut substream(seed, &["init"]));
    let report = fit(&mut backbone, graphs, labels, config, &mut substream(seed, &["fit"]))?;
    Ok((backbone, report))
}

/// Supervised cross-entropy training of an existing backbone; used for
/// base training and for fine-tuning on masked graphs.
pub fn fit(
    backbone: &mut Backbone,
    graphs: &[&ConnectomeGraph],
    labels: &[u8],
    config: &TrainConfig,
    rng: &mut StageRng,
) -> Result<TrainReport> {
    config.validate()?;
    if backbone.is_frozen() {
        return Err(CoreError::Contract("cannot train a frozen backbone".into()));
    }
    if graphs.len() != labels.len() {
        return Err(CoreError::Parameter(format!(
            "{} graphs but {} labels",
            graphs.len(),
            labels.len()
        )));
    }
    if graphs.is_empty() {
        return Err(CoreError::Config("empty training set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(CoreError::Parameter(format!("label {bad} out of range")));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(CoreError::Config("training set contains a single class".into()));
    }

    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;

    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_graphs: Vec<&ConnectomeGraph> = chunk.iter().map(|&i| graphs[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let batch = GraphBatch::new(&batch_graphs)?;
            let mut g = Graph::new();
            let w = g.constant(batch.weights.clone());
            let mut drop = DropoutCtx {
                p: config.dropout,
                rng: Some(&mut *rng),
            };
            let out = backbone_forward(
                &mut g,
                ParamView::trainable(&backbone.params),
                &backbone.arch,
                &batch,
                w,
                &mut drop,
            );
            let loss = g.cross_entropy_labels(out.logits, &batch_labels, NUM_CLASSES);
            let value = g.forward(loss, &backbone.params)?.item();
            let grads = g.backward(loss)?;
            adam.step(&mut backbone.params, &grads);
            total += value * chunk.len() as f64;
        }
        let epoch_loss = total / graphs.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(CoreError::Autodiff(AutodiffError::NonFinite {
                op: "training loss",
            }));
        }
        trace.push(epoch_loss);
        if let Some(patience) = config.patience {
            if epoch_loss < best - config.min_delta {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        loss_trace: trace,
        stopped_early,
    })
}
