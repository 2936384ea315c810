//! A compact reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Graphs are built up front with [`Graph`], evaluated with
//! [`Graph::forward`] against a set of named bindings, and differentiated
//! with [`Graph::backward`]. The operator set is deliberately small: just
//! what graph message passing, attention, MLP-Mixer blocks and
//! cross-entropy training need.
//!
//! ```
//! use connex_autodiff::{Graph, ParamStore, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let y = g.sigmoid(x);
//! let loss = g.sum(y);
//!
//! let mut bind = ParamStore::new();
//! bind.insert("x", Tensor::scalar(0.0));
//! assert_eq!(g.forward(loss, &bind).unwrap().item(), 0.5);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("x").unwrap().item(), 0.25);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};
pub use graph::{gelu, sigmoid, softplus, Graph, NodeId};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;
