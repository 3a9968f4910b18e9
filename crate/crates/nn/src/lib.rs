//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; calling
//! [`Graph::backward`] on a scalar node fills gradients for every node that
//! depends on a trainable parameter. Parameters live in a [`ParamStore`] keyed
//! by name and are bound into a graph on first use.
//!
//! Convolutions are batched per sample through [`goalcast_core::Exec`], so they
//! run on rayon when the `parallel` feature is on; per-sample weight
//! gradients are reduced in sample order, which keeps results bit-identical
//! across execution modes.

mod checkpoint;
mod graph;
mod kernels;
pub mod layers;
pub mod loss;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::ParamStore;
pub use tensor::Tensor;

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
