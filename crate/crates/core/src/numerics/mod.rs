//! Shared numerical substrate: tensors, reverse-mode differentiation, Adam,
//! PCA, exhaustive k-nearest-neighbor search, least squares and simple
//! statistics.

mod adam;
mod autodiff;
mod knn;
mod lstsq;
mod pca;
mod stats;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use autodiff::{
    evaluate_with_gradients, finite_difference, gelu, max_relative_error, Graph, NonFinite, Var,
};
pub use knn::{knn, knn_with_index, TimeIndex};
pub use lstsq::{linear_least_squares, predict_linear};
pub use pca::{participation_ratio, pca, PcaResult};
pub use stats::{mean, pearson_correlation, r_squared, std_dev, variance};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("graph output must be scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite value at node {node} ({op}) in {label}")]
    NonFinite { node: usize, op: &'static str, label: &'static str },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("k={k} infeasible: {detail}")]
    KnnInfeasible { k: usize, detail: String },
    #[error("singular normal equations; use ridge > 0")]
    Singular,
    #[error("zero variance input")]
    ZeroVariance,
    #[error("eigenvalue spectrum has no positive entry")]
    ZeroSpectrum,
    #[error("{0}")]
    Invalid(String),
}
