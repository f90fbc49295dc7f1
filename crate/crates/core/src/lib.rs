//! Regularized OptSpace for noisy low-rank matrix completion.
//!
//! The pipeline is trim → regularized spectral initialization → gradient
//! descent over pairs of orthonormal frames. Alongside the estimator the crate
//! ships closed-form large-system predictors for the spectral step (top
//! singular values, singular-vector overlaps, relative error and the optimal
//! shrinkage) and a seeded experiment harness that checks them by simulation.
//!
//! Module map:
//!
//! - [`obsmat`]: sparse observed entries, projection, trimming, holdout splits.
//! - [`mtx`]: MatrixMarket readers and writers.
//! - [`synthgen`]: synthetic instances and error metrics.
//! - [`spectral`]: truncated SVD, the spectral estimator, Soft-Impute.
//! - [`manifold`]: descent on the regularized cost.
//! - [`theory`]: asymptotic predictions.
//! - [`harness`]: experiment configuration, sweeps and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod kv;
pub mod linalg;
pub mod manifold;
pub mod mtx;
pub mod obsmat;
pub mod spectral;
pub mod synthgen;
pub mod theory;

pub use error::{Error, Result};
pub use manifold::{descend, DescentOptions, DescentTrace, Termination};
pub use obsmat::{DegreeProfile, Entry, ObservedMatrix};
pub use spectral::{
    spectral_estimate, truncated_svd, Factorization, Shrinkage, SvdOptions, SvdTriple,
};
pub use synthgen::{SynthInstance, SynthOptions};
pub use theory::{ModelParams, TheoryPrediction};
