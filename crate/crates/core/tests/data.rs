mod common;

use std::collections::BTreeSet;
use std::fs;

use common::oracles;
use connex_core::data::{
    build_graph, knn_sparsify, synthesize_dataset, ConnectomeMatrix, Dataset, LdpNeighborhood, SyntheticSpec,
};
use connex_core::error::CoreError;
use connex_core::rng::substream;
use proptest::prelude::*;
use rand::Rng;

const LDP_TOL: f64 = 1e-9;

#[test]
fn knn_matches_brute_force() {
    let mut rng = substream(1, &["knn-oracle"]);
    for inst in 0..200 {
        let m = rng.gen_range(2..=12);
        let k = rng.gen_range(1..m);
        let levels = if inst % 2 == 0 { 0 } else { 3 };
        let e = oracles::random_matrix(m, levels, &mut rng);
        let g = knn_sparsify(&e, k).unwrap();
        let got: BTreeSet<_> = g.edges.iter().copied().collect();
        assert_eq!(got.len(), g.edges.len(), "duplicate edges");
        assert_eq!(got, oracles::knn_edges(&e, k), "instance {inst}: M={m} k={k}");
        for (&(i, j), &w) in g.edges.iter().zip(&g.edge_weights) {
            assert_eq!(w, e.get(i, j));
        }
    }
}

#[test]
fn ldp_matches_brute_force() {
    let mut rng = substream(2, &["ldp-oracle"]);
    for inst in 0..200 {
        let m = rng.gen_range(2..=12);
        let k = rng.gen_range(1..m);
        let e = oracles::random_matrix(m, 4, &mut rng);
        for (hood, two_hop) in [(LdpNeighborhood::OneHop, false), (LdpNeighborhood::TwoHop, true)] {
            let g = build_graph(&e, k, hood).unwrap();
            let want = oracles::ldp(m, &g.edges.iter().copied().collect(), two_hop);
            for (q, (a, b)) in g.node_features.iter().zip(&want).enumerate() {
                // the degree is an integer and must match exactly
                assert_eq!(a[0], b[0], "instance {inst}, node {q}");
                assert_eq!((a[3], a[4]), (b[3], b[4]), "instance {inst}, node {q}");
                assert!((a[1] - b[1]).abs() <= LDP_TOL && (a[2] - b[2]).abs() <= LDP_TOL, "instance {inst}, node {q}");
            }
        }
    }
}

fn arb_matrix() -> impl Strategy<Value = (ConnectomeMatrix, usize)> {
    (2usize..=12).prop_flat_map(|m| {
        (proptest::collection::vec(0u8..5, m * (m - 1) / 2), 1..m).prop_map(move |(vals, k)| {
            let mut e = ConnectomeMatrix::zeros(m);
            let mut it = vals.into_iter();
            for i in 0..m {
                for j in i + 1..m {
                    e.set_sym(i, j, it.next().unwrap() as f64);
                }
            }
            (e, k)
        })
    })
}

proptest! {
    #[test]
    fn knn_graph_is_symmetric_with_bounded_degree((e, k) in arb_matrix()) {
        let g = build_graph(&e, k, LdpNeighborhood::OneHop).unwrap();
        let set: BTreeSet<_> = g.edges.iter().copied().collect();
        for &(i, j) in &set {
            prop_assert!(i != j);
            prop_assert!(set.contains(&(j, i)));
        }
        for f in &g.node_features {
            prop_assert!(f[0] >= k as f64 && f[0] <= (e.size() - 1) as f64);
            prop_assert!(f[3] <= f[1] + 1e-12 && f[1] <= f[4] + 1e-12);
            prop_assert!(f[2] >= 0.0);
        }
    }

    #[test]
    fn knn_is_invariant_to_node_relabelling((e, k) in arb_matrix(), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let m = e.size();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut substream(seed, &["perm"]));
        // relabelling breaks index tie-breaks, so use distinct weights
        let mut distinct = ConnectomeMatrix::zeros(m);
        for i in 0..m {
            for j in i + 1..m {
                distinct.set_sym(i, j, e.get(i, j) + (i * m + j) as f64 * 1e-3);
            }
        }
        let mut permuted = ConnectomeMatrix::zeros(m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    permuted.set(perm[i], perm[j], distinct.get(i, j));
                }
            }
        }
        let a: BTreeSet<_> = knn_sparsify(&distinct, k).unwrap().edges.into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        let b: BTreeSet<_> = knn_sparsify(&permuted, k).unwrap().edges.into_iter().collect();
        prop_assert_eq!(a, b);
    }
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec::with_random_planted(12, 6, 3, 1, 2.0, 1.0, 0.5, 4).unwrap()
}

#[test]
fn dataset_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthesize_dataset(&small_spec()).unwrap();
    let path = ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);
}

fn saved() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = synthesize_dataset(&small_spec()).unwrap().save(dir.path()).unwrap();
    (dir, path)
}

fn first_subject_file(dir: &std::path::Path) -> std::path::PathBuf {
    let mut files: Vec<_> = fs::read_dir(dir.join("sc")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}

#[test]
fn bad_label_names_the_subject() {
    let (_dir, path) = saved();
    let text = fs::read_to_string(&path).unwrap().replacen("\"label\": 0", "\"label\": 2", 1);
    fs::write(&path, text).unwrap();
    match Dataset::load(&path) {
        Err(CoreError::Load { subject, detail }) => {
            assert!(subject.starts_with("sub-"));
            assert!(detail.contains("label 2"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_matrix_file_is_reported() {
    let (dir, path) = saved();
    fs::remove_file(first_subject_file(dir.path())).unwrap();
    assert!(matches!(Dataset::load(&path), Err(CoreError::Load { .. })));
}

#[test]
fn asymmetric_and_wrong_size_matrices_are_rejected() {
    let (dir, path) = saved();
    let file = first_subject_file(dir.path());
    let mut e = ConnectomeMatrix::from_csv(&fs::read_to_string(&file).unwrap(), &file).unwrap();
    e.set(0, 1, e.get(0, 1) + 1.0);
    fs::write(&file, e.to_csv()).unwrap();
    let err = Dataset::load(&path).unwrap_err().to_string();
    assert!(err.contains("not symmetric"), "{err}");

    fs::write(&file, ConnectomeMatrix::zeros(5).to_csv()).unwrap();
    let err = Dataset::load(&path).unwrap_err().to_string();
    assert!(err.contains("M = 6"), "{err}");
}

#[test]
fn non_zero_diagonal_is_rejected() {
    let (dir, path) = saved();
    let file = first_subject_file(dir.path());
    let mut e = ConnectomeMatrix::from_csv(&fs::read_to_string(&file).unwrap(), &file).unwrap();
    e.set(2, 2, 1.0);
    fs::write(&file, e.to_csv()).unwrap();
    assert!(Dataset::load(&path).unwrap_err().to_string().contains("diagonal"));
}

#[test]
fn malformed_csv_reports_row_and_column() {
    let (dir, path) = saved();
    let file = first_subject_file(dir.path());
    let mut lines: Vec<String> = fs::read_to_string(&file).unwrap().lines().map(String::from).collect();
    lines[3] = lines[3].replacen(',', ",abc,", 1);
    lines[3] = lines[3].rsplit_once(',').unwrap().0.to_string();
    fs::write(&file, lines.join("\n")).unwrap();
    let err = Dataset::load(&path).unwrap_err().to_string();
    assert!(err.contains("row 4, column 2"), "{err}");
}

#[test]
fn unknown_manifest_key_is_rejected() {
    let (_dir, path) = saved();
    let text = fs::read_to_string(&path).unwrap().replacen("\"num_nodes\"", "\"extra\": 1, \"num_nodes\"", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(Dataset::load(&path), Err(CoreError::Format { .. })));
}
