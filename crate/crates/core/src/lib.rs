//! Wasserstein-2 barycenters of continuous measures.

pub mod bench;
pub mod congruent;
pub mod error;
pub mod gaussian_ref;
pub mod linalg;
pub mod measures;
pub mod nn;
pub mod ot_mmr;
pub mod rng;
pub mod win;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
