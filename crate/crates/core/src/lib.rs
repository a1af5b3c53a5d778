//! Preconditioned flow matching at desk scale.
//!
//! The crate pairs exactly solvable Gaussian and Gaussian-mixture transport
//! models (closed-form scores, velocities, conditioning and gradient-descent
//! dynamics) with small trainable flow-matching pipelines and three data
//! preconditioners: exact whitening, an affine-coupling normalizing flow and
//! a low-capacity flow pushforward.

// `!(x > 0.0)` is how the validators reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over small fixed-size rows read closer to the math.
#![allow(clippy::needless_range_loop)]

pub mod analytic;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flowmatch;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod points;
pub mod precond;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{Mat, SpectralMatrix};
pub use points::PointCloud;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
