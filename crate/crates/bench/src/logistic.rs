//! Bayesian logistic regression marginal likelihood.
//!
//! `h(β) = Σ_i log F(y_i βᵀx_i) + log N(β; 0, σ² I)` with `F` the logistic
//! function, `y_i ∈ {-1, 1}` and `x_i` the intercept followed by the first
//! `s - 1` predictor columns.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use cubestrat::nalgebra::DMatrix;
use cubestrat::transform::{LaplaceFit, LaplaceOptions, LogDensity, ScaleConvention};
use cubestrat::laplace_reparametrize;

use crate::{BenchError, Result};

const LABEL_NAMES: [&str; 6] = ["y", "label", "class", "outcome", "target", "response"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `±1`
    pub labels: Vec<f64>,
    /// One row per observation, predictors in file order.
    pub rows: Vec<Vec<f64>>,
    pub predictor_names: Vec<String>,
}

impl Dataset {
    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(File::open(path)?)
    }

    /// CSV with a header row. The label column is the one named `y`,
    /// `label`, `class`, `outcome`, `target` or `response` (any case), or
    /// the last column otherwise; labels in `{0, 1}` become `{-1, 1}`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers.is_empty() {
            return Err(BenchError::Data("empty header".into()));
        }
        let label_col = headers
            .iter()
            .position(|h| LABEL_NAMES.contains(&h.to_ascii_lowercase().as_str()))
            .unwrap_or(headers.len() - 1);
        let predictor_names = headers.iter().enumerate().filter(|&(i, _)| i != label_col).map(|(_, h)| h.clone()).collect();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(headers.len() - 1);
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| BenchError::Data(format!("record {}: '{field}' is not a number", line + 1)))?;
                if !v.is_finite() {
                    return Err(BenchError::Data(format!("record {}: non-finite value", line + 1)));
                }
                if i == label_col {
                    labels.push(v);
                } else {
                    row.push(v);
                }
            }
            rows.push(row);
        }
        let zero_one = labels.iter().all(|&y| y == 0.0 || y == 1.0);
        let pm_one = labels.iter().all(|&y| y == -1.0 || y == 1.0);
        if !zero_one && !pm_one {
            return Err(BenchError::Data("labels must be in {-1, 1} or {0, 1}".into()));
        }
        if zero_one {
            for y in labels.iter_mut() {
                *y = 2.0 * *y - 1.0;
            }
        }
        Ok(Self { labels, rows, predictor_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_predictors(&self) -> usize {
        self.predictor_names.len()
    }

    /// Centre and scale every predictor column to unit sample variance.
    pub fn z_score(&mut self) {
        let n = self.rows.len();
        if n < 2 {
            return;
        }
        for j in 0..self.num_predictors() {
            let mean = self.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = self.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in self.rows.iter_mut() {
                r[j] = (r[j] - mean) / sd;
            }
        }
    }
}

/// `log F(z) = -log(1 + e^{-z})`, stable for large `|z|`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    dim: usize,
    /// Design rows, intercept first.
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    prior_var: f64,
}

impl LogisticModel {
    /// Uses the intercept plus the first `s - 1` predictors.
    pub fn new(data: &Dataset, s: usize, prior_sd: f64) -> Result<Self> {
        if s == 0 || s - 1 > data.num_predictors() {
            return Err(BenchError::Config(format!(
                "need 1 ≤ s ≤ {} (intercept plus predictors), got {s}",
                data.num_predictors() + 1
            )));
        }
        if prior_sd.is_nan() || prior_sd <= 0.0 {
            return Err(BenchError::Config("prior standard deviation must be positive".into()));
        }
        let x = data
            .rows
            .iter()
            .map(|r| std::iter::once(1.0).chain(r[..s - 1].iter().copied()).collect())
            .collect();
        Ok(Self { dim: s, x, y: data.labels.clone(), prior_var: prior_sd * prior_sd })
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

impl LogDensity for LogisticModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, beta: &[f64]) -> f64 {
        let s = beta.len() as f64;
        let lik: f64 = self.x.iter().zip(&self.y).map(|(x, &y)| log_sigmoid(y * Self::dot(beta, x))).sum();
        let prior = -0.5 * Self::dot(beta, beta) / self.prior_var - 0.5 * s * (2.0 * std::f64::consts::PI * self.prior_var).ln();
        lik + prior
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = beta.iter().map(|b| -b / self.prior_var).collect();
        for (x, &y) in self.x.iter().zip(&self.y) {
            let w = y * sigmoid(-y * Self::dot(beta, x));
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += w * xi;
            }
        }
        g
    }

    fn hessian(&self, beta: &[f64]) -> DMatrix<f64> {
        let s = beta.len();
        let mut h = DMatrix::from_diagonal_element(s, s, -1.0 / self.prior_var);
        for x in &self.x {
            let z = Self::dot(beta, x);
            let w = sigmoid(z) * sigmoid(-z);
            for i in 0..s {
                for j in 0..s {
                    h[(i, j)] -= w * x[i] * x[j];
                }
            }
        }
        h
    }
}

/// Fits the Laplace recentring of the logistic posterior (prior
/// `N(0, prior_sd² I)`) and returns the transformed integrand on `[0,1]^s`.
/// With `subtract_mode_value` the integrand is scaled by `exp(-h(β̂))`, see
/// [`LaplaceOptions::subtract_mode_value`].
pub fn logistic_marginal_likelihood(
    data: &Dataset,
    s: usize,
    prior_sd: f64,
    tau: f64,
    convention: ScaleConvention,
    subtract_mode_value: bool,
) -> Result<LaplaceFit<LogisticModel>> {
    let model = LogisticModel::new(data, s, prior_sd)?;
    let options = LaplaceOptions::new(convention).tau(tau).subtract_mode_value(subtract_mode_value);
    Ok(laplace_reparametrize(model, &vec![0.0; s], &options)?)
}
