//! Simulated dataset I/O, staged training, evaluation, significance tests
//! and the `goalcast` command line.
//!
//! A run goes through `simulate` → `train` (warm-up, long-goal CVAE,
//! waypoint network, trajectory CVAE) → `evaluate` → `stats`. All outputs
//! live under one directory; see [`layout::Layout`].

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod layout;
pub mod significance;
pub mod train;
pub mod visual;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
