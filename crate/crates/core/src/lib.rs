//! Explanation-enhanced graph backbones and cross-modal attention-mixer
//! fusion for paired structural and functional connectomes.
//!
//! The pipeline per cross-validation fold:
//!
//! 1. sparsify each connectome to a k-NN graph with degree-profile node
//!    features ([`data`]);
//! 2. train one graph backbone per modality ([`backbone`]);
//! 3. learn a globally shared edge mask per modality against the frozen
//!    backbone, then fine-tune on masked graphs ([`explain`]);
//! 4. fuse the two sets of embeddings ([`fusion`]) and train the fusion
//!    network with a multi-head joint loss ([`train`]).

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod rng;
pub mod store;
pub mod train;

pub use config::PipelineConfig;
pub use error::{CoreError, Result};
