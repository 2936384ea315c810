//! Brute-force reference implementations, written independently of the
//! library code they check.

use std::collections::BTreeSet;

use connex_core::data::ConnectomeMatrix;

/// Directed edge set of the union-symmetrized k-NN graph. Node `j` is among
/// the `k` strongest of `i` iff fewer than `k` other nodes outrank it, where
/// a larger weight outranks and equal weights are won by the lower index.
pub fn knn_edges(e: &ConnectomeMatrix, k: usize) -> BTreeSet<(usize, usize)> {
    let m = e.size();
    let picks = |i: usize, j: usize| {
        let outranked_by = (0..m)
            .filter(|&l| l != i && l != j)
            .filter(|&l| e.get(i, l) > e.get(i, j) || (e.get(i, l) == e.get(i, j) && l < j))
            .count();
        outranked_by < k
    };
    let mut out = BTreeSet::new();
    for i in 0..m {
        for j in 0..m {
            if i != j && (picks(i, j) || picks(j, i)) {
                out.insert((i, j));
            }
        }
    }
    out
}

/// `[deg, mean, std, min, max]` from a dense adjacency matrix, with the
/// variance taken as `E[u^2] - E[u]^2`.
pub fn ldp(m: usize, edges: &BTreeSet<(usize, usize)>, two_hop: bool) -> Vec<[f64; 5]> {
    let mut adj = vec![vec![false; m]; m];
    for &(i, j) in edges {
        adj[i][j] = true;
    }
    let deg: Vec<usize> = adj.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
    (0..m)
        .map(|q| {
            let reach: Vec<usize> = (0..m)
                .filter(|&n| n != q)
                .filter(|&n| adj[q][n] || (two_hop && (0..m).any(|x| adj[q][x] && adj[x][n])))
                .collect();
            if reach.is_empty() {
                return [deg[q] as f64, 0.0, 0.0, 0.0, 0.0];
            }
            let c = reach.len() as f64;
            let s: usize = reach.iter().map(|&n| deg[n]).sum();
            let s2: usize = reach.iter().map(|&n| deg[n] * deg[n]).sum();
            let mean = s as f64 / c;
            let var = (s2 as f64 / c - mean * mean).max(0.0);
            let lo = reach.iter().map(|&n| deg[n]).min().unwrap();
            let hi = reach.iter().map(|&n| deg[n]).max().unwrap();
            [deg[q] as f64, mean, var.sqrt(), lo as f64, hi as f64]
        })
        .collect()
}

/// `(accuracy, precision, f1)` from the confusion counts, with F1 written
/// as `2TP / (2TP + FP + FN)`.
pub fn metrics(pred: &[u8], labels: &[u8]) -> (f64, f64, f64) {
    let count = |p: u8, l: u8| pred.iter().zip(labels).filter(|&(&a, &b)| a == p && b == l).count();
    let (tp, fp, fneg, tn) = (count(1, 1), count(1, 0), count(0, 1), count(0, 0));
    let acc = (tp + tn) as f64 / labels.len() as f64;
    let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    (acc, prec, f1)
}

/// A random symmetric matrix with zero diagonal. With `levels > 0` entries
/// are drawn from `levels` distinct values, which forces ties.
pub fn random_matrix(m: usize, levels: u32, rng: &mut impl rand::Rng) -> ConnectomeMatrix {
    let mut e = ConnectomeMatrix::zeros(m);
    for i in 0..m {
        for j in i + 1..m {
            let v = if levels > 0 {
                rng.gen_range(0..levels) as f64 / levels as f64
            } else {
                rng.gen_range(-1.0..1.0)
            };
            e.set_sym(i, j, v);
        }
    }
    e
}
