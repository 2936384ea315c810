//! k-NN sparsification and local degree profile features.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::matrix::ConnectomeMatrix;
use crate::error::{CoreError, Result};

/// Width of the local degree profile: `[deg, mean, std, min, max]`.
pub const LDP_WIDTH: usize = 5;

/// A sparsified connectome: directed edge list (always containing both
/// directions of every edge), the retained weights and per-node LDP
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectomeGraph {
    pub num_nodes: usize,
    /// Sorted `(i, j)` pairs; `(j, i)` is present whenever `(i, j)` is.
    pub edges: Vec<(usize, usize)>,
    /// `E[i, j]` for each edge.
    pub edge_weights: Vec<f64>,
    /// One row per node, columns `[deg, mean, std, min, max]`.
    pub node_features: Vec<[f64; LDP_WIDTH]>,
}

/// Neighbourhood used for the degree statistics in [`ldp_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdpNeighborhood {
    /// Degrees of direct neighbours.
    #[default]
    OneHop,
    /// Degrees of every distinct node within two hops, excluding the node
    /// itself.
    TwoHop,
}

/// The `k` strongest neighbours of each node, `j != i`, ordered by weight
/// descending with ties broken toward the lower index.
pub fn top_k_neighbors(e: &ConnectomeMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let m = e.size();
    if k == 0 || k >= m {
        return Err(CoreError::Parameter(format!(
            "k must satisfy 1 <= k < M, got k = {k} for M = {m}"
        )));
    }
    Ok((0..m)
        .map(|i| {
            let mut cand: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| e.get(i, b).total_cmp(&e.get(i, a)).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect())
}

/// Keeps, for every node, edges to its `k` strongest neighbours and
/// symmetrizes the result by union. Node features are left empty; see
/// [`build_graph`].
pub fn knn_sparsify(e: &ConnectomeMatrix, k: usize) -> Result<ConnectomeGraph> {
    let picks = top_k_neighbors(e, k)?;
    let mut set = BTreeSet::new();
    for (i, nbrs) in picks.iter().enumerate() {
        for &j in nbrs {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    let edges: Vec<(usize, usize)> = set.into_iter().collect();
    let edge_weights = edges.iter().map(|&(i, j)| e.get(i, j)).collect();
    Ok(ConnectomeGraph {
        num_nodes: e.size(),
        edges,
        edge_weights,
        node_features: Vec::new(),
    })
}

/// Local degree profile of every node: its degree followed by the mean,
/// population standard deviation, minimum and maximum of the degrees in
/// its neighbourhood. Isolated nodes get all zeros.
pub fn ldp_features(graph: &ConnectomeGraph, hood: LdpNeighborhood) -> Vec<[f64; LDP_WIDTH]> {
    let m = graph.num_nodes;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m];
    for &(i, j) in &graph.edges {
        if i != j {
            adj[i].insert(j);
        }
    }
    let deg: Vec<f64> = adj.iter().map(|s| s.len() as f64).collect();
    (0..m)
        .map(|q| {
            let hood_nodes: Vec<usize> = match hood {
                LdpNeighborhood::OneHop => adj[q].iter().copied().collect(),
                LdpNeighborhood::TwoHop => {
                    let mut s: BTreeSet<usize> = adj[q].clone();
                    for &n in &adj[q] {
                        s.extend(adj[n].iter().copied());
                    }
                    s.remove(&q);
                    s.into_iter().collect()
                }
            };
            if hood_nodes.is_empty() {
                return [deg[q], 0.0, 0.0, 0.0, 0.0];
            }
            let u: Vec<f64> = hood_nodes.iter().map(|&n| deg[n]).collect();
            let n = u.len() as f64;
            let mean = u.iter().sum::<f64>() / n;
            let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let min = u.iter().copied().fold(f64::INFINITY, f64::min);
            let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [deg[q], mean, var.sqrt(), min, max]
        })
        .collect()
}

/// Sparsifies `e` and attaches LDP node features.
pub fn build_graph(e: &ConnectomeMatrix, k: usize, hood: LdpNeighborhood) -> Result<ConnectomeGraph> {
    let mut g = knn_sparsify(e, k)?;
    g.node_features = ldp_features(&g, hood);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_from_edges(m: usize, undirected: &[(usize, usize)]) -> ConnectomeGraph {
        let mut edges: Vec<(usize, usize)> = undirected
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect();
        edges.sort();
        ConnectomeGraph {
            num_nodes: m,
            edge_weights: vec![1.0; edges.len()],
            edges,
            node_features: Vec::new(),
        }
    }

    #[test]
    fn three_node_example() {
        let e = ConnectomeMatrix::from_rows(&[
            vec![0.0, 0.9, 0.1],
            vec![0.9, 0.0, 0.5],
            vec![0.1, 0.5, 0.0],
        ])
        .unwrap();
        // 0-based: node 0 -> 1, node 1 -> 0, node 2 -> 1
        assert_eq!(top_k_neighbors(&e, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        let g = knn_sparsify(&e, 1).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(g.edge_weights, vec![0.9, 0.9, 0.5, 0.5]);
    }

    #[test]
    fn k_of_m_minus_one_is_complete() {
        let mut e = ConnectomeMatrix::zeros(5);
        for i in 0..5 {
            for j in i + 1..5 {
                e.set_sym(i, j, (i * 5 + j) as f64 * 0.1);
            }
        }
        let g = knn_sparsify(&e, 4).unwrap();
        assert_eq!(g.edges.len(), 20);
        assert!(g.edges.iter().all(|(i, j)| i != j));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let e = ConnectomeMatrix::from_rows(&[
            vec![0.0, 0.5, 0.5, 0.5],
            vec![0.5, 0.0, 0.2, 0.1],
            vec![0.5, 0.2, 0.0, 0.3],
            vec![0.5, 0.1, 0.3, 0.0],
        ])
        .unwrap();
        assert_eq!(top_k_neighbors(&e, 2).unwrap()[0], vec![1, 2]);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let e = ConnectomeMatrix::zeros(4);
        assert!(matches!(knn_sparsify(&e, 4), Err(CoreError::Parameter(_))));
        assert!(matches!(knn_sparsify(&e, 0), Err(CoreError::Parameter(_))));
    }

    #[test]
    fn ldp_on_path_graph() {
        let g = graph_from_edges(3, &[(0, 1), (1, 2)]);
        let f = ldp_features(&g, LdpNeighborhood::OneHop);
        assert_eq!(f[0], [1.0, 2.0, 0.0, 2.0, 2.0]);
        assert_eq!(f[1], [2.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(f[2], [1.0, 2.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn ldp_on_complete_graph_and_isolated_node() {
        let g = graph_from_edges(5, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let f = ldp_features(&g, LdpNeighborhood::OneHop);
        for row in &f[..4] {
            assert_eq!(*row, [3.0, 3.0, 0.0, 3.0, 3.0]);
        }
        assert_eq!(f[4], [0.0; 5]);
    }

    #[test]
    fn two_hop_widens_the_neighbourhood() {
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)]);
        let f = ldp_features(&g, LdpNeighborhood::TwoHop);
        // node 0 sees nodes 1 (deg 2) and 2 (deg 2)
        assert_eq!(f[0], [1.0, 2.0, 0.0, 2.0, 2.0]);
        // node 1 sees 0 (1), 2 (2), 3 (1)
        let mean = 4.0 / 3.0;
        let std = (((1.0 - mean) * (1.0f64 - mean) * 2.0 + (2.0 - mean) * (2.0 - mean)) / 3.0).sqrt();
        assert_eq!(f[1][0], 2.0);
        assert!((f[1][1] - mean).abs() < 1e-15 && (f[1][2] - std).abs() < 1e-15);
    }
}
