//! Joint loss, metrics, fusion training and cross-validation.

mod cv;
mod fusion;
mod loss;
mod metrics;

pub use cv::{
    config_tags, cross_validate, run_ablations, run_fold, stratified_folds, training_indices,
    unimodal_tags, CvOutcome, FoldAudit, FoldOutcome, ModalityRun,
};
pub use fusion::{
    fusion_logits, train_fusion, train_fusion_on_embeddings, FrozenEncoders, FusionTrainConfig,
    FusionTrainReport,
};
pub use loss::{joint_loss, LossWeights, WEIGHT_TOLERANCE};
pub use metrics::{metrics, predict, rows_to_csv, Metrics, MetricsRow, RESULTS_HEADER};
