use std::collections::{BTreeMap, BTreeSet};

use connex_autodiff::Tensor;
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fusion::{fusion_logits, train_fusion_on_embeddings, FusionTrainConfig};
use super::loss::LossWeights;
use super::metrics::{metrics, predict, Metrics, MetricsRow};
use crate::backbone::{evaluate, train_backbone, Backbone};
use crate::config::{FusionVariant, PipelineConfig};
use crate::data::{ConnectomeGraph, Dataset, Modality};
use crate::error::{CoreError, Result};
use crate::explain::{finetune_backbone, learn_global_mask, masked_embeddings, GlobalEdgeMask};
use crate::fusion::FusionMethod;
use crate::rng::{substream, subseed};

/// Test indices of each fold. Within each class, subjects are shuffled and
/// dealt round-robin, so fold sizes differ by at most one per class.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(CoreError::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(CoreError::Config(format!(
                "class {class} has {} subjects, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut substream(seed, &["folds", &class.to_string()]));
        for (n, i) in members.into_iter().enumerate() {
            folds[n % k].push(i);
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Complement of `test` in `0..n`.
pub fn training_indices(n: usize, test: &[usize]) -> Vec<usize> {
    let t: BTreeSet<usize> = test.iter().copied().collect();
    (0..n).filter(|i| !t.contains(i)).collect()
}

/// Subject ids seen by every training stage of a fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub test_ids: BTreeSet<String>,
    pub stage_ids: BTreeMap<String, BTreeSet<String>>,
}

impl FoldAudit {
    fn record(&mut self, stage: impl Into<String>, dataset: &Dataset, idx: &[usize]) {
        self.stage_ids
            .entry(stage.into())
            .or_default()
            .extend(idx.iter().map(|&i| dataset.subjects[i].id.clone()));
    }

    /// `(stage, id)` for every test subject that reached a training stage.
    pub fn leaks(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (stage, ids) in &self.stage_ids {
            for id in ids.intersection(&self.test_ids) {
                out.push((stage.clone(), id.clone()));
            }
        }
        out
    }
}

/// Per-modality products of one fold.
#[derive(Debug, Clone)]
pub struct ModalityRun {
    pub modality: Modality,
    pub base: Backbone,
    pub tuned: Backbone,
    pub mask: GlobalEdgeMask,
    pub base_trace: Vec<f64>,
    pub mask_trace: Vec<f64>,
    pub finetune_trace: Vec<f64>,
    pub base_metrics: Metrics,
    pub explained_metrics: Metrics,
    pub train_embeddings: Tensor,
    pub test_embeddings: Tensor,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub modalities: Vec<ModalityRun>,
    /// Test metrics per configuration tag.
    pub metrics: BTreeMap<String, Metrics>,
    pub fusion_traces: BTreeMap<String, Vec<f64>>,
    /// Loss weights picked by the grid search, per configuration tag.
    pub selected_weights: BTreeMap<String, LossWeights>,
    pub audit: FoldAudit,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub rows: Vec<MetricsRow>,
    pub folds: Vec<FoldOutcome>,
}

/// Configuration tags of the unimodal rows.
pub fn unimodal_tags(m: Modality) -> [String; 2] {
    [m.tag().to_string(), format!("{}_explained", m.tag())]
}

fn subset<'a>(graphs: &'a [ConnectomeGraph], idx: &[usize]) -> Vec<&'a ConnectomeGraph> {
    idx.iter().map(|&i| &graphs[i]).collect()
}

fn run_modality(
    dataset: &Dataset,
    graphs: &[ConnectomeGraph],
    modality: Modality,
    train_idx: &[usize],
    test_idx: &[usize],
    config: &PipelineConfig,
    fold_seed: u64,
    audit: &mut FoldAudit,
) -> Result<ModalityRun> {
    let labels = dataset.labels();
    let tag = modality.tag();
    let train_g = subset(graphs, train_idx);
    let test_g = subset(graphs, test_idx);
    let train_y: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let test_y: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();

    audit.record(format!("backbone/{tag}"), dataset, train_idx);
    let (base, base_report) = train_backbone(
        &train_g,
        &train_y,
        config.backbone.arch,
        &config.backbone.train,
        subseed(fold_seed, &["backbone", tag]),
    )?;
    let (_, base_logits) = evaluate(&base, &test_g)?;
    let base_metrics = metrics(&predict(&base_logits), &test_y)?;

    let mut frozen = base.clone();
    frozen.freeze();
    audit.record(format!("mask/{tag}"), dataset, train_idx);
    let (mask, mask_report) = learn_global_mask(
        &train_g,
        &frozen,
        modality,
        &config.mask,
        &mut substream(fold_seed, &["mask", tag]),
    )?;

    audit.record(format!("finetune/{tag}"), dataset, train_idx);
    let (mut tuned, ft_report) = finetune_backbone(
        &base,
        &train_g,
        &train_y,
        &mask,
        &config.finetune,
        &mut substream(fold_seed, &["finetune", tag]),
    )?;
    tuned.freeze();
    let (test_emb, tuned_logits) = masked_embeddings(&tuned, &test_g, &mask)?;
    let explained_metrics = metrics(&predict(&tuned_logits), &test_y)?;
    let (train_emb, _) = masked_embeddings(&tuned, &train_g, &mask)?;
    info!(
        "{tag}: base acc {:.3}, explained acc {:.3}, mask mean {:.3}",
        base_metrics.accuracy,
        explained_metrics.accuracy,
        mask.mean_weight()
    );
    Ok(ModalityRun {
        modality,
        base,
        tuned,
        mask,
        base_trace: base_report.loss_trace,
        mask_trace: mask_report.loss_trace,
        finetune_trace: ft_report.loss_trace,
        base_metrics,
        explained_metrics,
        train_embeddings: train_emb,
        test_embeddings: test_emb,
    })
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.last_dim();
    let mut v = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        v.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), c], v).expect("row selection")
}

/// Chooses loss weights from the built-in grid by validation accuracy on a
/// stratified hold-out of the training split. Ties keep the earlier grid
/// entry.
fn grid_search(
    rs: &Tensor,
    rf: &Tensor,
    labels: &[u8],
    variant: FusionVariant,
    config: &PipelineConfig,
    seed: u64,
) -> Result<LossWeights> {
    let inner = stratified_folds(labels, config.cv.folds, subseed(seed, &["grid", "split"]))?;
    let val = &inner[0];
    let fit = training_indices(labels.len(), val);
    let (rs_fit, rf_fit) = (select_rows(rs, &fit), select_rows(rf, &fit));
    let (rs_val, rf_val) = (select_rows(rs, val), select_rows(rf, val));
    let y_fit: Vec<u8> = fit.iter().map(|&i| labels[i]).collect();
    let y_val: Vec<u8> = val.iter().map(|&i| labels[i]).collect();
    let arch = config.fusion.arch(variant, rs.last_dim());
    let mut best: Option<(f64, LossWeights)> = None;
    for (n, w) in LossWeights::grid().into_iter().enumerate() {
        let cfg = FusionTrainConfig {
            loss_weights: w,
            ..config.fusion.train.clone()
        };
        let (model, _) = train_fusion_on_embeddings(&rs_fit, &rf_fit, &y_fit, arch, &cfg, subseed(seed, &["grid", &n.to_string()]))?;
        let acc = metrics(&predict(&fusion_logits(&model, &rs_val, &rf_val)?), &y_val)?.accuracy;
        if best.map_or(true, |(b, _)| acc > b) {
            best = Some((acc, w));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Runs the full pipeline (backbones, masks, fine-tuning, every fusion
/// variant) on one fold, using only the training split for fitting.
pub fn run_fold(
    dataset: &Dataset,
    graphs: &[Vec<ConnectomeGraph>; 2],
    fold: usize,
    test_idx: &[usize],
    config: &PipelineConfig,
) -> Result<FoldOutcome> {
    let labels = dataset.labels();
    let train_idx = training_indices(dataset.len(), test_idx);
    let fold_seed = subseed(config.seed, &["fold", &fold.to_string()]);
    let mut audit = FoldAudit {
        fold,
        test_ids: test_idx.iter().map(|&i| dataset.subjects[i].id.clone()).collect(),
        ..Default::default()
    };

    let mut modalities = Vec::with_capacity(2);
    let mut fold_metrics = BTreeMap::new();
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        let run = run_modality(dataset, &graphs[k], m, &train_idx, test_idx, config, fold_seed, &mut audit)?;
        let [base_tag, explained_tag] = unimodal_tags(m);
        fold_metrics.insert(base_tag, run.base_metrics);
        fold_metrics.insert(explained_tag, run.explained_metrics);
        modalities.push(run);
    }

    let train_y: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let test_y: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
    let (rs_tr, rf_tr) = (&modalities[0].train_embeddings, &modalities[1].train_embeddings);
    let (rs_te, rf_te) = (&modalities[0].test_embeddings, &modalities[1].test_embeddings);
    let fingerprints: Vec<String> = modalities.iter().map(|r| r.tuned.fingerprint()).collect();

    let mut fusion_traces = BTreeMap::new();
    let mut selected_weights = BTreeMap::new();
    for variant in &config.fusion.variants {
        let tag = variant.tag();
        let seed = subseed(fold_seed, &["fusion", &tag]);
        let mut train_cfg = config.fusion.train.clone();
        if config.fusion.grid_search && variant.method == FusionMethod::Connex {
            let w = grid_search(rs_tr, rf_tr, &train_y, *variant, config, seed)?;
            selected_weights.insert(tag.clone(), w);
            train_cfg.loss_weights = w;
        }
        audit.record(format!("fusion/{tag}"), dataset, &train_idx);
        let arch = config.fusion.arch(*variant, config.backbone.arch.channels);
        let (model, report) = train_fusion_on_embeddings(rs_tr, rf_tr, &train_y, arch, &train_cfg, seed)?;
        let m = metrics(&predict(&fusion_logits(&model, rs_te, rf_te)?), &test_y)?;
        info!("fold {fold} {tag}: acc {:.3}", m.accuracy);
        fold_metrics.insert(tag.clone(), m);
        fusion_traces.insert(tag, report.loss_trace);
    }
    let after: Vec<String> = modalities.iter().map(|r| r.tuned.fingerprint()).collect();
    if after != fingerprints {
        return Err(CoreError::Contract(
            "backbone parameters changed during fusion training".into(),
        ));
    }

    let leaks = audit.leaks();
    if let Some((stage, id)) = leaks.first() {
        return Err(CoreError::Contract(format!(
            "test subject {id} reached training stage {stage} in fold {fold}"
        )));
    }
    Ok(FoldOutcome {
        fold,
        train_idx,
        test_idx: test_idx.to_vec(),
        modalities,
        metrics: fold_metrics,
        fusion_traces,
        selected_weights,
        audit,
    })
}

/// Row order: unimodal rows (base then explained, structural first),
/// followed by the configured fusion variants.
pub fn config_tags(config: &PipelineConfig) -> Vec<String> {
    let mut tags: Vec<String> = Modality::ALL.iter().flat_map(|&m| unimodal_tags(m)).collect();
    tags.extend(config.fusion.variants.iter().map(FusionVariant::tag));
    tags
}

/// Stratified k-fold cross-validation of the whole pipeline.
pub fn cross_validate(dataset: &Dataset, config: &PipelineConfig) -> Result<CvOutcome> {
    config.validate()?;
    let labels = dataset.labels();
    let folds = stratified_folds(&labels, config.cv.folds, subseed(config.seed, &["cv"]))?;
    let graphs = [
        config.graph.build(dataset, Modality::Sc)?,
        config.graph.build(dataset, Modality::Fnc)?,
    ];
    let mut outcomes = Vec::with_capacity(folds.len());
    for (f, test) in folds.iter().enumerate() {
        info!("fold {}/{}", f + 1, folds.len());
        outcomes.push(run_fold(dataset, &graphs, f, test, config)?);
    }
    let rows = config_tags(config)
        .into_iter()
        .map(|tag| {
            let per_fold: Vec<Metrics> = outcomes.iter().map(|o| o.metrics[&tag]).collect();
            MetricsRow::from_folds(tag, &per_fold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvOutcome {
        rows,
        folds: outcomes,
    })
}

/// Every in-scope cell of the ablation matrix: four unimodal rows and the
/// three fusion methods with and without the unified view.
pub fn run_ablations(dataset: &Dataset, config: &PipelineConfig) -> Result<CvOutcome> {
    let mut cfg = config.clone();
    cfg.fusion.variants = FusionVariant::all();
    cross_validate(dataset, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_stratified_and_partition() {
        let labels: Vec<u8> = (0..23).map(|i| u8::from(i % 3 == 0)).collect();
        let folds = stratified_folds(&labels, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for class in [0u8, 1] {
            let sizes: Vec<usize> = folds
                .iter()
                .map(|f| f.iter().filter(|&&i| labels[i] == class).count())
                .collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "{sizes:?}");
        }
    }

    #[test]
    fn small_class_is_rejected() {
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1];
        assert!(matches!(stratified_folds(&labels, 5, 0), Err(CoreError::Config(_))));
    }

    #[test]
    fn audit_flags_overlap() {
        let mut a = FoldAudit::default();
        a.test_ids.insert("s1".into());
        a.stage_ids.entry("mask/sc".into()).or_default().insert("s1".into());
        a.stage_ids.entry("backbone/sc".into()).or_default().insert("s2".into());
        assert_eq!(a.leaks(), vec![("mask/sc".to_string(), "s1".to_string())]);
    }
}
