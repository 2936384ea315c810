//! On-disk formats for trained artifacts.
//!
//! Checkpoints are JSON documents holding named tensors with their shapes
//! plus the architecture they belong to; loading re-checks every shape.
//! Masks are an `M x M` CSV of pre-sigmoid logits with a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use connex_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneArch};
use crate::data::{dataset::write_file, ConnectomeMatrix, Modality};
use crate::error::{CoreError, Result};
use crate::explain::{GlobalEdgeMask, MaskConfig};
use crate::fusion::{FusionArch, FusionModel};

pub const CHECKPOINT_FORMAT: &str = "connex-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint<A> {
    format: String,
    version: u32,
    kind: String,
    arch: A,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

fn to_named(params: &ParamStore) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.clone(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        })
        .collect()
}

fn from_named(tensors: Vec<NamedTensor>, path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for t in tensors {
        let tensor = Tensor::new(t.shape, t.values).map_err(|e| CoreError::Format {
            path: path.to_path_buf(),
            detail: format!("tensor {}: {e}", t.name),
        })?;
        if store.insert(t.name.clone(), tensor).is_some() {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                detail: format!("tensor {} listed twice", t.name),
            });
        }
    }
    Ok(store)
}

fn save_checkpoint<A: Serialize>(
    path: &Path,
    kind: &str,
    arch: A,
    metadata: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        arch,
        metadata,
        tensors: to_named(params),
    };
    let json = serde_json::to_string(&ck).expect("checkpoint serializes");
    write_file(path, &(json + "\n"))
}

fn load_checkpoint<A: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<(A, serde_json::Value, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let ck: Checkpoint<A> = serde_json::from_str(&text).map_err(|e| CoreError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let bad = |detail: String| CoreError::Format {
        path: path.to_path_buf(),
        detail,
    };
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    if ck.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", ck.kind)));
    }
    let params = from_named(ck.tensors, path)?;
    Ok((ck.arch, ck.metadata, params))
}

pub fn save_backbone(path: &Path, backbone: &Backbone, metadata: serde_json::Value) -> Result<()> {
    save_checkpoint(path, "backbone", backbone.arch, metadata, &backbone.params)
}

/// Loads a backbone, optionally requiring a specific architecture.
pub fn load_backbone(path: &Path, expected: Option<&BackboneArch>) -> Result<Backbone> {
    let (arch, _, params): (BackboneArch, _, _) = load_checkpoint(path, "backbone")?;
    if let Some(e) = expected {
        if *e != arch {
            return Err(CoreError::Config(format!(
                "{} was trained with {arch:?}, config asks for {e:?}",
                path.display()
            )));
        }
    }
    Backbone::from_params(arch, params)
}

/// Saves a fusion model. The metadata records the fixed batch size, token
/// layout and view order alongside any caller-supplied fields.
pub fn save_fusion(path: &Path, model: &FusionModel, extra: serde_json::Value) -> Result<()> {
    let a = &model.arch;
    let metadata = serde_json::json!({
        "batch_size": a.batch_size,
        "tokens": a.tokens,
        "model_dim": a.model_dim,
        "view_order": a.views().iter().map(|v| v.tag()).collect::<Vec<_>>(),
        "extra": extra,
    });
    save_checkpoint(path, "fusion", model.arch, metadata, &model.params)
}

pub fn load_fusion(path: &Path) -> Result<FusionModel> {
    let (arch, _, params): (FusionArch, _, _) = load_checkpoint(path, "fusion")?;
    FusionModel::from_params(arch, params)
}

/// Settings a mask was learned with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSidecar {
    pub modality: Modality,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
}

impl MaskSidecar {
    pub fn new(modality: Modality, seed: u64, cfg: &MaskConfig) -> Self {
        Self {
            modality,
            seed,
            lambda1: cfg.lambda_sparsity,
            lambda2: cfg.lambda_entropy,
            steps: cfg.steps,
        }
    }
}

/// `mask.csv` -> `mask.json`.
pub fn sidecar_path(mask_csv: &Path) -> PathBuf {
    mask_csv.with_extension("json")
}

pub fn save_mask(path: &Path, mask: &GlobalEdgeMask, sidecar: &MaskSidecar) -> Result<()> {
    write_file(path, &mask.to_matrix().to_csv())?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    write_file(&sidecar_path(path), &(json + "\n"))
}

pub fn load_mask(path: &Path) -> Result<(GlobalEdgeMask, MaskSidecar)> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| CoreError::io(&side_path, e))?;
    let sidecar: MaskSidecar = serde_json::from_str(&side_text).map_err(|e| CoreError::Format {
        path: side_path.clone(),
        detail: e.to_string(),
    })?;
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let y = ConnectomeMatrix::from_csv(&text, path)?;
    let mask = GlobalEdgeMask::from_matrix(sidecar.modality, &y).map_err(|e| CoreError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok((mask, sidecar))
}
