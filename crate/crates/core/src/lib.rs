//! Canopy height regression from multi-temporal InSAR coherence.

pub mod baselines;
pub mod coherence;
pub mod container;
pub mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod raster;
pub mod simulator;
pub mod workflow;

pub use error::{Error, Result};
pub use raster::Raster;

/// Crate version, recorded in every written artifact and run manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
