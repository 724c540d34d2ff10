//! Two-stage fitting of hierarchical Bayesian animal movement models.
//!
//! Individual-level models are fit independently (and in parallel) by an
//! adaptive random-walk Metropolis sampler in [`stage1`]. The resulting
//! posterior draw pools are recombined into population-level inference by
//! the tuning-free resampling chain in [`stage2`], which never touches the
//! raw telemetry data.
//!
//! Two individual-level models are provided:
//!
//! * [`rsf`]: a gridded Poisson resource-selection model for independent
//!   telemetry fixes.
//! * [`ctds`]: a continuous-time discrete-space movement model fit to
//!   imputed paths produced by the functional movement model in [`fmm`].

pub mod ctds;
pub mod diagnostics;
mod error;
pub mod fmm;
pub mod probdist;
pub mod raster;
pub mod rng;
pub mod rsf;
pub mod stage1;
pub mod stage2;
pub mod telemetry;

pub use error::{Error, ErrorKind, Result};
