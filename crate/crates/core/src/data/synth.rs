//! Synthetic paired connectomes with planted group differences.
//!
//! Every off-diagonal weight is drawn as `|N(0, noise_std)|`. For label-1
//! subjects the planted edges of each modality are then raised by
//! `effect_size`. The two modalities get different (optionally partially
//! overlapping) planted sets and independent noise, so each carries signal
//! the other lacks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Subject};
use super::matrix::{ConnectomeMatrix, Modality};
use crate::error::{CoreError, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub num_nodes: usize,
    /// Planted structural edges, as 0-based node pairs.
    pub planted_sc: Vec<(usize, usize)>,
    /// Planted functional edges, as 0-based node pairs.
    pub planted_fnc: Vec<(usize, usize)>,
    pub effect_size: f64,
    pub noise_std: f64,
    /// Fraction of label-1 subjects.
    pub class_balance: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A spec with `per_modality` random planted edges per modality, of
    /// which the first `shared` are common to both.
    #[allow(clippy::too_many_arguments)]
    pub fn with_random_planted(
        num_subjects: usize,
        num_nodes: usize,
        per_modality: usize,
        shared: usize,
        effect_size: f64,
        noise_std: f64,
        class_balance: f64,
        seed: u64,
    ) -> Result<Self> {
        let pairs = num_nodes * num_nodes.saturating_sub(1) / 2;
        if shared > per_modality || 2 * per_modality - shared > pairs {
            return Err(CoreError::Parameter(format!(
                "cannot plant {per_modality} edges per modality ({shared} shared) among {pairs} pairs"
            )));
        }
        let mut all: Vec<(usize, usize)> = (0..num_nodes)
            .flat_map(|i| (i + 1..num_nodes).map(move |j| (i, j)))
            .collect();
        all.shuffle(&mut substream(seed, &["synth", "planted"]));
        let sc = all[..per_modality].to_vec();
        let mut fnc = all[..shared].to_vec();
        fnc.extend_from_slice(&all[per_modality..2 * per_modality - shared]);
        let spec = Self {
            num_subjects,
            num_nodes,
            planted_sc: sc,
            planted_fnc: fnc,
            effect_size,
            noise_std,
            class_balance,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn planted(&self, modality: Modality) -> &[(usize, usize)] {
        match modality {
            Modality::Sc => &self.planted_sc,
            Modality::Fnc => &self.planted_fnc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Parameter(msg));
        if self.num_nodes < 2 {
            return bad(format!("num_nodes = {} < 2", self.num_nodes));
        }
        if self.num_subjects == 0 {
            return bad("num_subjects = 0".into());
        }
        if self.effect_size.is_nan() || self.effect_size < 0.0 {
            return bad(format!("effect_size = {} must be non-negative", self.effect_size));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std = {} must be positive", self.noise_std));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return bad(format!("class_balance = {} must be in (0, 1)", self.class_balance));
        }
        for m in Modality::ALL {
            let mut seen = BTreeSet::new();
            for &(i, j) in self.planted(m) {
                if i == j {
                    return bad(format!("planted {m} edge ({i}, {j}) is on the diagonal"));
                }
                if i >= self.num_nodes || j >= self.num_nodes {
                    return bad(format!("planted {m} edge ({i}, {j}) outside M = {}", self.num_nodes));
                }
                if !seen.insert((i.min(j), i.max(j))) {
                    return bad(format!("planted {m} edge ({i}, {j}) listed twice"));
                }
            }
        }
        Ok(())
    }
}

/// Generates the dataset described by `spec`; identical specs give
/// identical datasets.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let p = spec.num_subjects;
    let positives = ((p as f64) * spec.class_balance).round() as usize;
    let mut labels: Vec<u8> = (0..p).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut substream(spec.seed, &["synth", "labels"]));

    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let width = (p.max(1) as f64).log10().floor() as usize + 1;
    let subjects = labels
        .iter()
        .enumerate()
        .map(|(n, &label)| {
            let mut rng = substream(spec.seed, &["synth", "subject", &n.to_string()]);
            let mut draw = |modality: Modality| {
                let m = spec.num_nodes;
                let mut mat = ConnectomeMatrix::zeros(m);
                for i in 0..m {
                    for j in i + 1..m {
                        let v: f64 = noise.sample(&mut rng);
                        mat.set_sym(i, j, v.abs());
                    }
                }
                if label == 1 {
                    for &(i, j) in spec.planted(modality) {
                        let v = mat.get(i, j) + spec.effect_size;
                        mat.set_sym(i, j, v);
                    }
                }
                mat
            };
            let sc = draw(Modality::Sc);
            let fnc = draw(Modality::Fnc);
            Subject {
                id: format!("sub-{n:0width$}"),
                sc,
                fnc,
                label,
            }
        })
        .collect();
    Dataset::new(spec.num_nodes, subjects)
}
