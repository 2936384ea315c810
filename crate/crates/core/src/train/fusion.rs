use connex_autodiff::{Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{joint_loss, LossWeights};
use crate::backbone::{Backbone, ParamView};
use crate::data::ConnectomeGraph;
use crate::error::{CoreError, Result};
use crate::explain::{masked_embeddings, GlobalEdgeMask};
use crate::fusion::{fusion_forward, FusionArch, FusionBatch, FusionModel};
use crate::rng::{substream, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainReport {
    pub loss_trace: Vec<f64>,
}

/// Trains a freshly initialized fusion model on precomputed embeddings
/// (`[n, C]` each). Batches are reshuffled every epoch and the last one is
/// zero-padded to the fixed batch size.
pub fn train_fusion_on_embeddings(
    rs: &Tensor,
    rf: &Tensor,
    labels: &[u8],
    arch: FusionArch,
    config: &FusionTrainConfig,
    seed: u64,
) -> Result<(FusionModel, FusionTrainReport)> {
    let n = labels.len();
    if n == 0 || rs.shape() != [n, arch.channels] || rf.shape() != [n, arch.channels] {
        return Err(CoreError::Parameter(format!(
            "fusion inputs {:?} and {:?} do not match {n} subjects of width {}",
            rs.shape(),
            rf.shape(),
            arch.channels
        )));
    }
    let mut model = FusionModel::init(arch, &mut substream(seed, &["init"]))?;
    let head_weights = config.loss_weights.for_heads(arch.num_heads())?;
    let mut rng = substream(seed, &["fit"]);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(arch.batch_size) {
            let batch = FusionBatch::gather(rs, rf, labels, chunk, arch.batch_size)?;
            let (value, grads) = {
                let mut g = Graph::new();
                let loss = batch_loss(&mut g, &model, &batch, &head_weights, Some(&mut rng))?;
                let value = g.forward(loss, &model.params)?.item();
                (value, g.backward(loss)?)
            };
            adam.step(&mut model.params, &grads);
            total += value * batch.num_valid() as f64;
        }
        trace.push(total / n as f64);
    }
    Ok((model, FusionTrainReport { loss_trace: trace }))
}

fn batch_loss(
    g: &mut Graph,
    model: &FusionModel,
    batch: &FusionBatch,
    head_weights: &[f64],
    rng: Option<&mut StageRng>,
) -> Result<connex_autodiff::NodeId> {
    let rs = g.constant(batch.rs.clone());
    let rf = g.constant(batch.rf.clone());
    let out = fusion_forward(
        g,
        ParamView::trainable(&model.params),
        &model.arch,
        rs,
        rf,
        &batch.valid,
        rng,
    );
    joint_loss(g, &out.logits, &batch.labels, head_weights, &batch.valid)
}

/// Final-head logits `[n, 2]` in evaluation mode. Subjects are batched in
/// their given order, and the last batch is zero-padded.
pub fn fusion_logits(model: &FusionModel, rs: &Tensor, rf: &Tensor) -> Result<Tensor> {
    let n = rs.shape()[0];
    let s = model.arch.batch_size;
    let dummy = vec![0u8; n];
    let mut out = Vec::with_capacity(n * 2);
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(s) {
        let batch = FusionBatch::gather(rs, rf, &dummy, chunk, s)?;
        let mut g = Graph::new();
        let a = g.constant(batch.rs.clone());
        let b = g.constant(batch.rf.clone());
        let o = fusion_forward(
            &mut g,
            ParamView::trainable(&model.params),
            &model.arch,
            a,
            b,
            &batch.valid,
            None,
        );
        let z = g.forward(o.final_logits(), &model.params)?;
        out.extend_from_slice(&z.values()[..chunk.len() * 2]);
    }
    Ok(Tensor::new(vec![n, 2], out)?)
}

/// Fine-tuned backbones and learned masks for both modalities, in
/// structural, functional order.
pub struct FrozenEncoders<'a> {
    pub backbones: [&'a Backbone; 2],
    pub masks: [&'a GlobalEdgeMask; 2],
}

impl FrozenEncoders<'_> {
    /// Masked-graph embeddings of both modalities.
    pub fn embed(&self, sc: &[&ConnectomeGraph], fnc: &[&ConnectomeGraph]) -> Result<(Tensor, Tensor)> {
        let (rs, _) = masked_embeddings(self.backbones[0], sc, self.masks[0])?;
        let (rf, _) = masked_embeddings(self.backbones[1], fnc, self.masks[1])?;
        Ok((rs, rf))
    }

    fn fingerprints(&self) -> [String; 2] {
        [self.backbones[0].fingerprint(), self.backbones[1].fingerprint()]
    }
}

/// Trains the fusion network on embeddings from frozen backbones. The
/// backbones are fingerprinted before and after; any change is reported
/// as a contract violation.
pub fn train_fusion(
    sc: &[&ConnectomeGraph],
    fnc: &[&ConnectomeGraph],
    labels: &[u8],
    encoders: &FrozenEncoders<'_>,
    arch: FusionArch,
    config: &FusionTrainConfig,
    seed: u64,
) -> Result<(FusionModel, FusionTrainReport)> {
    let before = encoders.fingerprints();
    let (rs, rf) = encoders.embed(sc, fnc)?;
    let result = train_fusion_on_embeddings(&rs, &rf, labels, arch, config, seed)?;
    if encoders.fingerprints() != before {
        return Err(CoreError::Contract(
            "backbone parameters changed during fusion training".into(),
        ));
    }
    Ok(result)
}
