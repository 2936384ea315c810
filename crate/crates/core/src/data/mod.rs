//! Connectome data: matrices, datasets, graph formulation and synthetic
//! generation.

pub mod dataset;
pub mod graph;
pub mod matrix;
pub mod synth;

pub use dataset::{Dataset, Manifest, ManifestEntry, Subject, LABEL_HC, LABEL_SZ};
pub use graph::{build_graph, knn_sparsify, ldp_features, ConnectomeGraph, LdpNeighborhood, LDP_WIDTH};
pub use matrix::{upper_index, upper_len, upper_pairs, ConnectomeMatrix, Modality};
pub use synth::{synthesize_dataset, SyntheticSpec};
