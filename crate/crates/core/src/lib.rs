//! Cone-beam CT scatter workbench: procedural phantoms, primary and Monte
//! Carlo scatter projections over a grid of fields of view, U-Net and
//! FOV-conditioned Aux-Net scatter estimators, per-FOV evaluation and
//! scatter-corrected FDK reconstruction.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
// Index loops walk several parallel buffers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod recon;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
