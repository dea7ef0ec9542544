//! Kernel theory of continual learning in wide, deep networks.
//!
//! The crate computes the statistics of a network trained sequentially on a
//! stream of tasks under a Gibbs posterior with a quadratic coupling of
//! strength `lambda` between consecutive hidden-weight configurations:
//!
//! - [`temporal`]: the two-time temporal factors that renormalize kernels
//!   between task times.
//! - [`kernel`]: deep two-time kernels for linear and ReLU networks, the
//!   tangent kernel that governs the infinite-coupling limit, and cached
//!   kernel sets for task pairs.
//! - [`mc`]: finite-width Monte Carlo estimators used as independent checks
//!   of the analytic recursions.
//! - [`orderparams`]: task-relation order parameters, the forgetting
//!   predictor built from them, and the phase boundary `alpha_c`.
//! - [`singlehead`]: sequential mean/variance predictors for a shared
//!   readout across a task sequence.
//! - [`multihead`]: the T=2 kernel-renormalization solver with its
//!   frozen/overfitting/generalization regimes and per-head predictors.
//! - [`tasks`]: task-sequence generators (target-distractor, permutation,
//!   split, interpolation, context) plus source-data loaders and
//!   preprocessing.
//! - [`analysis`]: saturating-exponential fits, variance decomposition
//!   across order parameters, and boundary estimation from curves.
//! - [`gd`]: a Langevin-free gradient-descent simulator for cross-checking
//!   theory against finite networks.

pub mod analysis;
pub mod config;
pub mod data;
pub mod gd;
pub mod kernel;
pub mod linalg;
pub mod mc;
pub mod multihead;
pub mod orderparams;
pub mod rng;
pub mod singlehead;
pub mod tasks;
pub mod temporal;

pub use config::{KernelConfig, Lambda, Nonlinearity};
pub use data::{Dataset, Split};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix {what} is not positive definite (jitter up to {max_jitter:.3e} exhausted)")]
    NotPositiveDefinite { what: &'static str, max_jitter: f64 },
    #[error("dimension mismatch in {what}: {left} vs {right}")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("fixed point did not converge after {iters} iterations (last residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible task parameters: {0}")]
    Infeasible(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
