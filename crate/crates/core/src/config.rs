//! Pipeline configuration.
//!
//! Every field has a default, so `{}` is a complete configuration; unknown
//! keys are rejected at every level. A config file may also be a run
//! record written by the command-line tool, in which case its embedded
//! `config` is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneArch, TrainConfig};
use crate::data::{build_graph, ConnectomeGraph, Dataset, LdpNeighborhood, Modality, SyntheticSpec};
use crate::error::{CoreError, Result};
use crate::explain::{finetune_defaults, MaskConfig};
use crate::fusion::{FusionArch, FusionMethod};
use crate::train::FusionTrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub graph: GraphConfig,
    pub backbone: BackboneConfig,
    pub mask: MaskConfig,
    pub finetune: TrainConfig,
    pub fusion: FusionConfig,
    pub cv: CvConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSource::default(),
            graph: GraphConfig::default(),
            backbone: BackboneConfig::default(),
            mask: MaskConfig::default(),
            finetune: finetune_defaults(),
            fusion: FusionConfig::default(),
            cv: CvConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Where subjects come from. Relative manifest paths are resolved against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::with_random_planted(120, 20, 10, 3, 1.5, 1.0, 0.5, 0).expect("valid default"))
    }
}

impl DatasetSource {
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        match self {
            Self::Manifest(p) => {
                let path = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Dataset::load(&path)
            }
            Self::Synthetic(spec) => crate::data::synthesize_dataset(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
    pub ldp: LdpNeighborhood,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 5,
            ldp: LdpNeighborhood::OneHop,
        }
    }
}

impl GraphConfig {
    /// Sparsified graphs of every subject for one modality.
    pub fn build(&self, dataset: &Dataset, modality: Modality) -> Result<Vec<ConnectomeGraph>> {
        dataset
            .subjects
            .iter()
            .map(|s| build_graph(s.matrix(modality), self.k, self.ldp))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub arch: BackboneArch,
    pub train: TrainConfig,
}

/// One fusion configuration of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionVariant {
    pub method: FusionMethod,
    pub unified: bool,
}

impl FusionVariant {
    pub fn all() -> Vec<FusionVariant> {
        FusionMethod::ALL
            .iter()
            .flat_map(|&method| {
                [false, true].map(|unified| FusionVariant { method, unified })
            })
            .collect()
    }

    pub fn tag(&self) -> String {
        if self.unified {
            format!("{}_unified", self.method.tag())
        } else {
            self.method.tag().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub batch_size: usize,
    pub tokens: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub train: FusionTrainConfig,
    /// Pick loss weights from the built-in grid on a held-out part of each
    /// training split before the final fit.
    pub grid_search: bool,
    /// Fusion configurations evaluated by cross-validation.
    pub variants: Vec<FusionVariant>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let a = FusionArch::default();
        Self {
            batch_size: a.batch_size,
            tokens: a.tokens,
            model_dim: a.model_dim,
            heads: a.heads,
            dropout: a.dropout,
            train: FusionTrainConfig::default(),
            grid_search: false,
            variants: FusionVariant::all(),
        }
    }
}

impl FusionConfig {
    pub fn arch(&self, variant: FusionVariant, channels: usize) -> FusionArch {
        FusionArch {
            method: variant.method,
            unified: variant.unified,
            batch_size: self.batch_size,
            channels,
            tokens: self.tokens,
            model_dim: self.model_dim,
            heads: self.heads,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub top_n: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { top_n: 100 }
    }
}

#[derive(Deserialize)]
struct RecordShim {
    config: PipelineConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CoreError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.cv.folds < 2 {
            return Err(CoreError::Config(format!("cv.folds = {} < 2", self.cv.folds)));
        }
        self.backbone.train.validate()?;
        self.finetune.validate()?;
        self.fusion.train.loss_weights.validate()?;
        for v in &self.fusion.variants {
            self.fusion.arch(*v, self.backbone.arch.channels).validate()?;
        }
        if self.backbone.arch.input_dim != crate::data::LDP_WIDTH {
            return Err(CoreError::Config(format!(
                "backbone input width {} must equal the LDP width {}",
                self.backbone.arch.input_dim,
                crate::data::LDP_WIDTH
            )));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    /// Parses a config, or the `config` member of a run record.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CoreError::Format {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        let is_record = value.get("config").is_some() && value.get("stage").is_some();
        let parsed = if is_record {
            serde_json::from_value::<RecordShim>(value).map(|r| r.config)
        } else {
            serde_json::from_value::<PipelineConfig>(value)
        };
        let cfg = parsed.map_err(|e| CoreError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
