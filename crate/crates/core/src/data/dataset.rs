//! Subjects, datasets and the on-disk manifest format.
//!
//! A manifest is JSON of the form
//!
//! ```json
//! { "num_nodes": 53,
//!   "subjects": [ { "id": "s01", "sc_path": "sc/s01.csv",
//!                   "fnc_path": "fnc/s01.csv", "label": 1 } ] }
//! ```
//!
//! Matrix paths are resolved relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::{ConnectomeMatrix, Modality};
use crate::error::{CoreError, Result};

/// Healthy control.
pub const LABEL_HC: u8 = 0;
/// Schizophrenia.
pub const LABEL_SZ: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub sc: ConnectomeMatrix,
    pub fnc: ConnectomeMatrix,
    pub label: u8,
}

impl Subject {
    pub fn matrix(&self, modality: Modality) -> &ConnectomeMatrix {
        match modality {
            Modality::Sc => &self.sc,
            Modality::Fnc => &self.fnc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_nodes: usize,
    pub subjects: Vec<Subject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub sc_path: PathBuf,
    pub fnc_path: PathBuf,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<ManifestEntry>,
    pub num_nodes: usize,
}

impl Dataset {
    /// Validates labels, matrix sizes, symmetry and diagonals.
    pub fn new(num_nodes: usize, subjects: Vec<Subject>) -> Result<Self> {
        for s in &subjects {
            check_subject(s, num_nodes)?;
        }
        Ok(Self {
            num_nodes,
            subjects,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.subjects {
            c[s.label as usize] += 1;
        }
        c
    }

    /// Loads a dataset from a JSON manifest and its CSV matrices.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| CoreError::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::Format {
            path: manifest_path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut subjects = Vec::with_capacity(manifest.subjects.len());
        for entry in &manifest.subjects {
            let load_err = |detail: String| CoreError::Load {
                subject: entry.id.clone(),
                detail,
            };
            let label = match entry.label {
                0 => LABEL_HC,
                1 => LABEL_SZ,
                other => return Err(load_err(format!("label {other} is not 0 or 1"))),
            };
            let read = |rel: &Path| -> Result<ConnectomeMatrix> {
                let path = base.join(rel);
                let text = fs::read_to_string(&path)
                    .map_err(|e| load_err(format!("cannot read {}: {e}", path.display())))?;
                ConnectomeMatrix::from_csv(&text, &path).map_err(|e| load_err(e.to_string()))
            };
            let subject = Subject {
                id: entry.id.clone(),
                sc: read(&entry.sc_path)?,
                fnc: read(&entry.fnc_path)?,
                label,
            };
            check_subject(&subject, manifest.num_nodes)?;
            subjects.push(subject);
        }
        Ok(Self {
            num_nodes: manifest.num_nodes,
            subjects,
        })
    }

    /// Writes `manifest.json` plus `sc/<id>.csv` and `fnc/<id>.csv` under
    /// `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["sc", "fnc"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| CoreError::io(dir.join(sub), e))?;
        }
        let mut entries = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            let sc_path = PathBuf::from("sc").join(format!("{}.csv", s.id));
            let fnc_path = PathBuf::from("fnc").join(format!("{}.csv", s.id));
            write_file(&dir.join(&sc_path), &s.sc.to_csv())?;
            write_file(&dir.join(&fnc_path), &s.fnc.to_csv())?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                sc_path,
                fnc_path,
                label: s.label as i64,
            });
        }
        let manifest = Manifest {
            subjects: entries,
            num_nodes: self.num_nodes,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&path, &(json + "\n"))?;
        Ok(path)
    }

    /// Subjects at the given positions, in that order.
    pub fn select(&self, idx: &[usize]) -> Vec<&Subject> {
        idx.iter().map(|&i| &self.subjects[i]).collect()
    }
}

fn check_subject(s: &Subject, num_nodes: usize) -> Result<()> {
    let err = |detail: String| CoreError::Load {
        subject: s.id.clone(),
        detail,
    };
    if s.label > 1 {
        return Err(err(format!("label {} is not 0 or 1", s.label)));
    }
    for m in Modality::ALL {
        let mat = s.matrix(m);
        if mat.size() != num_nodes {
            return Err(err(format!(
                "{m} matrix is {0}x{0}, dataset has M = {num_nodes}",
                mat.size()
            )));
        }
        mat.validate().map_err(|d| err(format!("{m} matrix: {d}")))?;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| CoreError::io(path, e))
}
