//! Built-in integrands.

use std::f64::consts::{E, PI};
use std::path::PathBuf;

use cubestrat::transform::VanishingIntegrand;
use cubestrat::{wrap, DerivativeOracle, Integrand, MultiIndex, Polynomial, ScaleConvention};

use crate::logistic::{logistic_marginal_likelihood, Dataset};
use crate::{BenchError, Result};

/// `f_1(u) = u e^u` and, for `s ≥ 2`, `f_s(u) = (Π_j u_j^{j-1}) exp(Π_j u_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestFunction {
    dim: usize,
}

pub fn test_function(s: usize) -> TestFunction {
    assert!(s >= 1, "dimension must be positive");
    TestFunction { dim: s }
}

impl TestFunction {
    /// `I(f_1) = 1`, `I(f_s) = e - Σ_{j<s} 1/j!`.
    pub fn exact(&self) -> f64 {
        if self.dim == 1 {
            return 1.0;
        }
        let mut fact = 1.0;
        let mut sum = 0.0;
        for j in 0..self.dim {
            if j > 0 {
                fact *= j as f64;
            }
            sum += 1.0 / fact;
        }
        E - sum
    }

    /// `‖f_1‖_r = max |f_1^{(r)}| = (1 + r) e` (one dimension only).
    pub fn norm_r(&self, r: usize) -> Option<f64> {
        (self.dim == 1).then_some((1.0 + r as f64) * E)
    }
}

impl Integrand for TestFunction {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, u: &[f64]) -> f64 {
        if self.dim == 1 {
            return u[0] * u[0].exp();
        }
        let prod: f64 = u.iter().product();
        let weight: f64 = u.iter().enumerate().map(|(j, &x)| x.powi(j as i32)).product();
        weight * prod.exp()
    }
}

impl DerivativeOracle for TestFunction {
    fn derivative(&self, alpha: &MultiIndex, x: &[f64]) -> Option<f64> {
        // f_1^{(a)}(u) = (u + a) e^u
        (self.dim == 1).then(|| (x[0] + alpha.0[0] as f64) * x[0].exp())
    }
}

/// Standard normal density on `ℝ^s`.
#[derive(Debug, Clone, Copy)]
pub struct StdNormal(pub usize);

impl Integrand for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let q: f64 = x.iter().map(|v| v * v).sum();
        (-0.5 * q).exp() / (2.0 * PI).powf(self.0 as f64 / 2.0)
    }
}

/// `Π_i 12012 (u_i (1 - u_i))^6`: integral 1, vanishing with its first five
/// derivatives on the boundary.
#[derive(Debug, Clone, Copy)]
pub struct Bump(pub usize);

impl Integrand for Bump {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, u: &[f64]) -> f64 {
        u.iter().map(|&x| 12012.0 * (x * (1.0 - x)).powi(6)).product()
    }
}

/// `1 + Σ_i (u_i - 0.3 u_i^2) + 0.5 Σ_{i<j} u_i u_j`.
pub fn poly2(s: usize) -> Polynomial {
    let unit = |i: usize, e: usize| {
        let mut v = vec![0; s];
        v[i] = e;
        MultiIndex(v)
    };
    let mut terms = vec![(MultiIndex::zero(s), 1.0)];
    for i in 0..s {
        terms.push((unit(i, 1), 1.0));
        terms.push((unit(i, 2), -0.3));
        for j in i + 1..s {
            let mut v = vec![0; s];
            v[i] = 1;
            v[j] = 1;
            terms.push((MultiIndex(v), 0.5));
        }
    }
    Polynomial::new(s, terms)
}

/// What to integrate, as named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// One of `fs`, `poly2`, `gauss`, `bump`, `logistic`.
    pub id: String,
    pub dim: usize,
    pub tau: f64,
    pub dataset: Option<PathBuf>,
    pub scale: Option<ScaleConvention>,
    pub zscore: bool,
}

impl WorkloadSpec {
    pub fn new(id: &str, dim: usize) -> Self {
        Self { id: id.to_string(), dim, tau: 1.5, dataset: None, scale: None, zscore: false }
    }
}

pub struct Workload {
    pub name: String,
    pub integrand: Box<dyn Integrand>,
    pub oracle: Option<Box<dyn DerivativeOracle>>,
    pub exact: Option<f64>,
    /// Whether the integrand vanishes on the boundary with its derivatives.
    pub vanishing: bool,
    /// The integral of interest is `exp(log_offset)` times the integral of
    /// `integrand`.
    pub log_offset: f64,
}

pub fn build_workload(spec: &WorkloadSpec) -> Result<Workload> {
    let s = spec.dim;
    if s == 0 {
        return Err(BenchError::Config("dimension must be positive".into()));
    }
    let plain = |integrand: Box<dyn Integrand>, oracle, exact, vanishing| Workload {
        name: spec.id.clone(),
        integrand,
        oracle,
        exact: Some(exact),
        vanishing,
        log_offset: 0.0,
    };
    Ok(match spec.id.as_str() {
        "fs" => {
            let f = test_function(s);
            let oracle: Option<Box<dyn DerivativeOracle>> = (s == 1).then(|| Box::new(f) as Box<dyn DerivativeOracle>);
            plain(Box::new(f), oracle, f.exact(), false)
        }
        "poly2" => {
            let p = poly2(s);
            let exact = p.integral();
            plain(Box::new(p.clone()), Some(Box::new(p)), exact, false)
        }
        "gauss" => {
            let f: VanishingIntegrand<StdNormal> = wrap(StdNormal(s), spec.tau)?;
            plain(Box::new(f), None, 1.0, true)
        }
        "bump" => plain(Box::new(Bump(s)), None, 1.0, true),
        "logistic" => {
            let path = spec
                .dataset
                .as_ref()
                .ok_or_else(|| BenchError::Config("the logistic workload needs --dataset".into()))?;
            let convention = spec
                .scale
                .ok_or_else(|| BenchError::Config("the logistic workload needs --scale (hessian or inverse-hessian)".into()))?;
            let mut data = Dataset::from_path(path)?;
            if spec.zscore {
                data.z_score();
            }
            let fit = logistic_marginal_likelihood(&data, s, 5.0, spec.tau, convention, true)?;
            let log_offset = fit.integrand.log_offset();
            Workload {
                name: spec.id.clone(),
                integrand: Box::new(fit.integrand),
                oracle: None,
                exact: None,
                vanishing: true,
                log_offset,
            }
        }
        other => return Err(BenchError::Config(format!("unknown integrand '{other}' (fs, poly2, gauss, bump, logistic)"))),
    })
}
