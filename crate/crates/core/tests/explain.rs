use connex_core::backbone::{train_backbone, Backbone, BackboneArch, TrainConfig};
use connex_core::data::{build_graph, synthesize_dataset, ConnectomeGraph, ConnectomeMatrix, LdpNeighborhood, Modality, SyntheticSpec};
use connex_core::error::CoreError;
use connex_core::explain::{
    apply_mask, finetune_backbone, learn_global_mask, mask_graph, top_connections, GlobalEdgeMask, MaskConfig,
};
use connex_core::rng::substream;
use proptest::prelude::*;

fn setup() -> (Vec<ConnectomeGraph>, Vec<u8>, Backbone) {
    let spec = SyntheticSpec::with_random_planted(24, 10, 4, 1, 3.0, 1.0, 0.5, 5).unwrap();
    let ds = synthesize_dataset(&spec).unwrap();
    let gs: Vec<ConnectomeGraph> =
        ds.subjects.iter().map(|s| build_graph(&s.sc, 3, LdpNeighborhood::OneHop).unwrap()).collect();
    let refs: Vec<&ConnectomeGraph> = gs.iter().collect();
    let cfg = TrainConfig {
        epochs: 20,
        dropout: 0.0,
        patience: None,
        learning_rate: 5e-3,
        ..Default::default()
    };
    let (mut b, _) = train_backbone(&refs, &ds.labels(), BackboneArch::default(), &cfg, 1).unwrap();
    b.freeze();
    (gs, ds.labels(), b)
}

fn arb_matrix() -> impl Strategy<Value = ConnectomeMatrix> {
    (2usize..=10).prop_flat_map(|m| {
        proptest::collection::vec(-5.0f64..5.0, m * (m - 1) / 2).prop_map(move |v| {
            let mut e = ConnectomeMatrix::zeros(m);
            let mut it = v.into_iter();
            for i in 0..m {
                for j in i + 1..m {
                    e.set_sym(i, j, it.next().unwrap());
                }
            }
            e
        })
    })
}

proptest! {
    #[test]
    fn zero_logits_halve_the_matrix(e in arb_matrix()) {
        let mask = GlobalEdgeMask::constant(Modality::Sc, e.size(), 0.0);
        let out = apply_mask(&e, &mask).unwrap();
        for (a, b) in out.values().iter().zip(e.values()) {
            prop_assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn masked_matrix_stays_symmetric(e in arb_matrix(), seed in 0u64..1000) {
        let mask = GlobalEdgeMask::random(Modality::Fnc, e.size(), 2.0, &mut substream(seed, &["m"])).unwrap();
        let out = apply_mask(&e, &mask).unwrap();
        prop_assert!(out.validate().is_ok());
    }
}

#[test]
fn size_mismatch_is_rejected() {
    let mask = GlobalEdgeMask::constant(Modality::Sc, 4, 0.0);
    assert!(apply_mask(&ConnectomeMatrix::zeros(5), &mask).is_err());
}

#[test]
fn zero_steps_return_the_initial_mask_and_leave_the_backbone_alone() {
    let (gs, _, b) = setup();
    let refs: Vec<&ConnectomeGraph> = gs.iter().collect();
    let before = b.fingerprint();
    let cfg = MaskConfig {
        steps: 0,
        ..Default::default()
    };
    let (mask, report) = learn_global_mask(&refs, &b, Modality::Sc, &cfg, &mut substream(3, &["mask"])).unwrap();
    let init = GlobalEdgeMask::random(Modality::Sc, 10, cfg.init_std, &mut substream(3, &["mask"])).unwrap();
    assert_eq!(mask, init);
    assert!(report.loss_trace.is_empty());

    let (_, report) =
        learn_global_mask(&refs, &b, Modality::Sc, &MaskConfig { steps: 5, ..cfg }, &mut substream(3, &["mask"])).unwrap();
    assert_eq!(report.loss_trace.len(), 5);
    assert!(report.loss_trace.iter().all(|v| v.is_finite()));
    assert_eq!(b.fingerprint(), before);
}

#[test]
fn unfrozen_backbone_is_a_contract_violation() {
    let (gs, _, mut b) = setup();
    b.unfreeze();
    let refs: Vec<&ConnectomeGraph> = gs.iter().collect();
    let err = learn_global_mask(&refs, &b, Modality::Sc, &MaskConfig::default(), &mut substream(0, &["m"])).unwrap_err();
    assert!(matches!(err, CoreError::Contract(_)), "{err}");
}

#[test]
fn strong_sparsity_drives_the_mask_down() {
    let (gs, _, b) = setup();
    let refs: Vec<&ConnectomeGraph> = gs.iter().collect();
    let cfg = MaskConfig {
        steps: 150,
        learning_rate: 0.05,
        lambda_sparsity: 100.0,
        lambda_entropy: 0.0,
        init_std: 0.1,
    };
    let (mask, _) = learn_global_mask(&refs, &b, Modality::Sc, &cfg, &mut substream(0, &["m"])).unwrap();
    assert!(mask.mean_weight() < 0.1, "mean weight {}", mask.mean_weight());
}

#[test]
fn finetuning_copies_the_backbone() {
    let (gs, labels, b) = setup();
    let refs: Vec<&ConnectomeGraph> = gs.iter().collect();
    let mask = GlobalEdgeMask::constant(Modality::Sc, 10, 1.0);
    let before = b.fingerprint();
    let zero = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let (tuned, report) = finetune_backbone(&b, &refs, &labels, &mask, &zero, &mut substream(0, &["ft"])).unwrap();
    assert_eq!(tuned.fingerprint(), before);
    assert!(report.loss_trace.is_empty());

    let some = TrainConfig {
        epochs: 3,
        ..zero
    };
    let (tuned, report) = finetune_backbone(&b, &refs, &labels, &mask, &some, &mut substream(0, &["ft"])).unwrap();
    assert_ne!(tuned.fingerprint(), before);
    assert_eq!(b.fingerprint(), before);
    assert!(b.is_frozen());
    assert_eq!(report.loss_trace.len(), 3);
}

#[test]
fn mask_graph_keeps_topology_and_scales_weights() {
    let (gs, _, _) = setup();
    let mask = GlobalEdgeMask::random(Modality::Sc, 10, 1.0, &mut substream(4, &["m"])).unwrap();
    let masked = mask_graph(&gs[0], &mask).unwrap();
    assert_eq!(masked.edges, gs[0].edges);
    assert_eq!(masked.node_features, gs[0].node_features);
    for ((&(i, j), &w), &orig) in masked.edges.iter().zip(&masked.edge_weights).zip(&gs[0].edge_weights) {
        assert!((w - orig * mask.weight(i, j)).abs() < 1e-15);
    }
}

#[test]
fn top_connections_are_normalized_and_ranked() {
    let mut e = ConnectomeMatrix::zeros(4);
    e.set_sym(0, 1, 2.0);
    e.set_sym(2, 3, 4.0);
    e.set_sym(1, 2, 4.0);
    e.set_sym(0, 3, 1.0);
    let mask = GlobalEdgeMask::constant(Modality::Fnc, 4, 0.0);
    let r = top_connections(&[&e, &e], &mask, 1, 3).unwrap();
    assert_eq!(r.pairs(), vec![(1, 2), (2, 3), (0, 1)]);
    assert_eq!(r.edges[0].weight, 1.0);
    assert_eq!(r.edges[2].weight, 0.5);
    assert!(r.to_csv().starts_with("node_i,node_j,normalized_weight\n"));
}
