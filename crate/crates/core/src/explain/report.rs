use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{apply_mask, GlobalEdgeMask};
use crate::data::{upper_pairs, ConnectomeMatrix, Modality};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub i: usize,
    pub j: usize,
    /// Group-average masked weight divided by the group maximum.
    pub weight: f64,
}

/// Strongest group-level connections under a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub modality: Modality,
    pub group: u8,
    pub edges: Vec<RankedEdge>,
}

/// Averages the masked matrices of one group, normalizes by the maximum
/// entry and returns the `n` strongest upper-triangle pairs (all pairs if
/// `n` exceeds their number). Ties keep the lower `(i, j)` first.
pub fn top_connections(
    matrices: &[&ConnectomeMatrix],
    mask: &GlobalEdgeMask,
    group: u8,
    n: usize,
) -> Result<ExplanationReport> {
    let first = matrices
        .first()
        .ok_or_else(|| CoreError::Parameter(format!("group {group} has no subjects")))?;
    let m = first.size();
    let mut avg = vec![0.0; m * m];
    for e in matrices {
        let masked = apply_mask(e, mask)?;
        for (a, v) in avg.iter_mut().zip(masked.values()) {
            *a += v;
        }
    }
    let count = matrices.len() as f64;
    avg.iter_mut().for_each(|v| *v /= count);
    let max = upper_pairs(m)
        .iter()
        .map(|&(i, j)| avg[i * m + j])
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut edges: Vec<RankedEdge> = upper_pairs(m)
        .into_iter()
        .map(|(i, j)| RankedEdge {
            i,
            j,
            weight: avg[i * m + j] * scale,
        })
        .collect();
    edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then((a.i, a.j).cmp(&(b.i, b.j))));
    edges.truncate(n);
    Ok(ExplanationReport {
        modality: mask.modality,
        group,
        edges,
    })
}

impl ExplanationReport {
    /// `node_i,node_j,normalized_weight` rows, 0-based node indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_i,node_j,normalized_weight\n");
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{:.10}", e.i, e.j, e.weight);
        }
        out
    }

    /// Undirected DOT graph with edge weights as pen widths.
    pub fn to_dot(&self) -> String {
        let mut out = format!("graph {}_group{} {{\n", self.modality, self.group);
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  n{} -- n{} [weight={:.6}, penwidth={:.3}];",
                e.i,
                e.j,
                e.weight,
                0.5 + 4.5 * e.weight
            );
        }
        out.push_str("}\n");
        out
    }

    /// Edges as unordered pairs, in rank order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.i, e.j)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat() -> ConnectomeMatrix {
        ConnectomeMatrix::from_rows(&[
            vec![0.0, 0.2, 0.9, 0.4],
            vec![0.2, 0.0, 0.4, 0.1],
            vec![0.9, 0.4, 0.0, 0.7],
            vec![0.4, 0.1, 0.7, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn identity_mask_single_subject_ranks_own_entries() {
        let e = mat();
        let mask = GlobalEdgeMask::constant(Modality::Sc, 4, 30.0);
        let r = top_connections(&[&e], &mask, 1, 3).unwrap();
        assert_eq!(r.pairs(), vec![(0, 2), (2, 3), (0, 3)]);
        assert!((r.edges[0].weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn n_is_clamped_and_weights_sorted() {
        let e = mat();
        let mask = GlobalEdgeMask::constant(Modality::Sc, 4, 0.3);
        let r = top_connections(&[&e, &e], &mask, 0, 100).unwrap();
        assert_eq!(r.edges.len(), 6);
        assert!(r.edges.windows(2).all(|w| w[0].weight >= w[1].weight));
        assert!(r.edges.iter().all(|e| (0.0..=1.0).contains(&e.weight)));
        // ties (0.4 twice) keep the lower pair first
        assert_eq!(&r.pairs()[2..4], &[(0, 3), (1, 2)]);
    }

    #[test]
    fn empty_group_is_an_error() {
        let mask = GlobalEdgeMask::constant(Modality::Sc, 4, 0.0);
        assert!(top_connections(&[], &mask, 1, 5).is_err());
    }

    #[test]
    fn csv_and_dot_list_every_edge() {
        let e = mat();
        let mask = GlobalEdgeMask::constant(Modality::Fnc, 4, 30.0);
        let r = top_connections(&[&e], &mask, 1, 2).unwrap();
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_dot().contains("n0 -- n2"));
    }
}
