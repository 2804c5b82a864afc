use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("point {point:?} lies outside the stratified domain")]
    OutOfDomain { point: Vec<f64> },

    #[error("invalid stencil: {0}")]
    InvalidStencil(String),

    #[error("derivative order {order} not supported by {nodes} nodes / smoothness {limit}")]
    Order { order: usize, nodes: usize, limit: usize },

    #[error("resolution k={k} too small: need at least {needed}")]
    Resolution { k: usize, needed: usize },

    #[error("stencil node {node:?} has no value")]
    IncompleteEvaluation { node: Vec<i64> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("integrand returned a non-finite value {value} at {point:?}")]
    NonFinite { point: Vec<f64>, value: f64 },

    #[error("derivative oracle failed for alpha={alpha:?}")]
    Oracle { alpha: Vec<usize> },

    #[error("replicates cannot be aligned: {0}")]
    Alignment(String),

    #[error("mode search did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    Optimization {
        iterations: usize,
        gradient_norm: f64,
        /// (iteration, objective, max-norm of gradient) per iterate.
        trace: Vec<(usize, f64, f64)>,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
