//! Gaussian cellular sheaves on graphs.
//!
//! This crate implements sheaf Laplacians for node features that are Gaussian
//! distributions — a mean part acting on stalk vectors and a covariance part
//! acting on the PSD cone by congruence — together with the GSNN architecture
//! for distribution-on-distribution regression, a minimal reverse-mode
//! differentiation engine, entropic optimal-transport losses, and the synthetic
//! and weather dataset tooling used by the experiment CLI.
//!
//! The main entry points are:
//!
//! - [`graph`]: undirected graphs and the random / geographic generators.
//! - [`gaussian`]: PSD matrices, Gaussians, pushforwards, divergences, sampling.
//! - [`sheaf`]: restriction maps, mean/covariance/Gaussian Laplacians,
//!   transport, holonomy, and energy diagnostics.
//! - [`autodiff`]: the tape, differentiable ops, Sinkhorn, and Adam.
//! - [`model`]: GSNN and the baseline regressors, training and evaluation.
//! - [`data`]: dataset synthesis, target construction, splits, weather CSV.
//! - [`verify`]: the self-check suite behind the CLI `verify` subcommand.

pub mod autodiff;
pub mod data;
pub mod gaussian;
pub mod graph;
pub mod model;
pub mod sheaf;
pub mod verify;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument (generator parameters, degrees of freedom, ratios...).
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Dimension or shape mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),
    /// A matrix that must be invertible is singular at working tolerance.
    #[error("singularity error: {0}")]
    Singularity(String),
    /// Structural degeneracy, e.g. an isolated node where degrees must be positive.
    #[error("degeneracy error: {0}")]
    Degeneracy(String),
    /// A walk referenced non-adjacent consecutive nodes.
    #[error("path error: {0}")]
    Path(String),
    /// Non-finite values where finite numbers are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Matrix factorization failed (after any jitter schedule).
    #[error("factorization error: {0}")]
    Factorization(String),
    /// A CSV or JSON input did not match the declared schema.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Seeded RNG used everywhere determinism is promised.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
