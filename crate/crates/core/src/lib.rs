//! Building blocks for environment-aware trajectory forecasting.
//!
//! The crate covers everything that does not need a neural network:
//! world/pixel geometry and local-map extraction ([`raster`]), Gaussian
//! heatmap encoding ([`heatmap`]), procedural environments with a
//! social-force walker ([`envsim`]), forecast metrics ([`metrics`]) and
//! cross-method significance tests ([`stats`]).
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod envsim;
pub mod error;
pub mod exec;
pub mod heatmap;
pub mod metrics;
pub mod raster;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Exec;
pub use raster::{Homography, Point2, Raster, SemanticGrid};
