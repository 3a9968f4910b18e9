//! Networks of the two-stage forecaster.
//!
//! * [`macro_models`]: a U-Net conditional VAE that samples long-term goal
//!   heatmaps over a local semantic map, and a deterministic U-Net that turns
//!   a long-term goal into intermediate waypoint heatmaps.
//! * [`micro_model`]: a recurrent conditional VAE that produces full
//!   world-coordinate trajectories conditioned on those goals.
//!
//! Parameters live in a [`goalcast_nn::ParamStore`] under per-network name
//! prefixes so that upstream stages can be frozen while later ones train.

pub mod gaussian;
pub mod macro_models;
pub mod micro_model;
pub mod unet;

pub use gaussian::{DiagonalGaussian, GaussVars};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] goalcast_nn::Error),
    #[error(transparent)]
    Core(#[from] goalcast_core::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("model state error: {0}")]
    State(String),
    #[error("training fault in stage '{stage}' at batch {batch}: {msg}")]
    TrainingFault { stage: String, batch: usize, msg: String },
}
