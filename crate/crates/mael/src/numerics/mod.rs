//! Self-contained numerical kernels: dense symmetric eigensolver (cyclic
//! Jacobi), k-means with restarts, spectral clustering on the normalized
//! Laplacian, and a primal stochastic-subgradient linear SVM.
//!
//! Everything is deterministic given the explicit seed arguments; there is
//! no hidden global RNG state.

mod eig;
mod kmeans;
mod matrix;
mod rng;
mod spectral;
mod svm;

pub use eig::{sym_eig, SymEig};
pub use kmeans::{kmeans, kmeans_detailed, wcss, KmeansResult};
pub use matrix::SymMatrix;
pub use rng::{mix_seed, rng_from};
pub use spectral::spectral_cluster;
pub use svm::{primal_objective, svm_score, train_linear_svm, LinearSvmModel};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("matrix entry at ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("iteration limit reached without convergence: {0}")]
    NoConvergence(String),
}

/// Squared Euclidean distance between two equal-length slices.
pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
