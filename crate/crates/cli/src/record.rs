//! Reproducibility records.
//!
//! Every run writes a JSON record next to its main output holding the
//! argument list, the effective configuration, the seed and a content
//! hash of every input file. `connex rerun` replays a stage from the
//! record alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use connex_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub stage: String,
    pub seed: u64,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: PipelineConfig,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path to content hash.
    pub outputs: BTreeMap<String, String>,
}

/// SHA-256 of the bytes framed as a git blob (`blob <len>\0<bytes>`), so
/// it matches `git hash-object` in a SHA-256 repository.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(content_hash(&bytes))
}

/// `out.json` -> `out.json.record.json`; a directory gets
/// `run_record.json` inside it.
pub fn record_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run_record.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".record.json");
        PathBuf::from(s)
    }
}

impl RunRecord {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a run record: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    /// Fails if any recorded input no longer has its recorded content.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (path, want) in &self.inputs {
            let got = hash_file(Path::new(path))?;
            if &got != want {
                return Err(CliError::Usage(format!("input {path} changed since the run was recorded")));
            }
        }
        Ok(())
    }
}
