//! Current-source localization on a synthetic spherical head: analytic MEG
//! forward model, regularized linear inverses (MNE, depth-weighted MNE,
//! sLORETA), and a deep-prior solver that fits an untrained convolutional
//! generator to a single observation.

pub mod autograd;
pub mod deep_prior;
pub mod error;
pub mod headmodel;
pub mod io;
pub mod simulate;
pub mod solvers;

pub use error::{Error, Result};

// nalgebra types appear in the public API (lead-field matrices, sensor
// vectors), so the crate is re-exported for downstream use.
pub use nalgebra;
