//! Experiment runner for the `cubestrat` estimators: test integrands, the
//! logistic-regression marginal likelihood, estimator ladders over `k` and
//! CSV output.

pub mod config;
pub mod experiment;
pub mod functions;
pub mod logistic;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] cubestrat::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad data: {0}")]
    Data(String),

    #[error("bad configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub use config::Settings;
pub use experiment::{fit_slope, group_slopes, read_rows, run, run_orders, write_orders, write_rows, ExperimentConfig, OrderRow, RelMode, ResultRow};
pub use functions::{build_workload, test_function, TestFunction, Workload, WorkloadSpec};
pub use logistic::{logistic_marginal_likelihood, Dataset, LogisticModel};
