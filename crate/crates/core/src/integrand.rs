//! Integrand abstractions.
//!
//! Integrands are called concurrently from worker threads, hence `Sync`.

use crate::stencil::MultiIndex;

pub trait Integrand: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, u: &[f64]) -> f64;
}

impl<T: Integrand + ?Sized> Integrand for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, u: &[f64]) -> f64 {
        (**self).eval(u)
    }
}

impl<T: Integrand + ?Sized> Integrand for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, u: &[f64]) -> f64 {
        (**self).eval(u)
    }
}

/// Adapts a closure.
#[derive(Clone)]
pub struct FnIntegrand<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnIntegrand<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Integrand for FnIntegrand<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, u: &[f64]) -> f64 {
        (self.f)(u)
    }
}

/// Analytic partial derivatives `D^α f(x)`; `None` when unavailable.
pub trait DerivativeOracle: Sync {
    fn derivative(&self, alpha: &MultiIndex, x: &[f64]) -> Option<f64>;
}

/// Adapts a closure.
#[derive(Clone)]
pub struct FnOracle<F>(pub F);

impl<F: Fn(&MultiIndex, &[f64]) -> Option<f64> + Sync> DerivativeOracle for FnOracle<F> {
    fn derivative(&self, alpha: &MultiIndex, x: &[f64]) -> Option<f64> {
        (self.0)(alpha, x)
    }
}

/// Oracle that reports every derivative as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOracle;

impl DerivativeOracle for ZeroOracle {
    fn derivative(&self, _: &MultiIndex, _: &[f64]) -> Option<f64> {
        Some(0.0)
    }
}

/// Polynomial `Σ a_β u^β` with exact integral and derivatives, handy as a
/// test integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<(MultiIndex, f64)>,
}

impl Polynomial {
    pub fn new(dim: usize, terms: Vec<(MultiIndex, f64)>) -> Self {
        assert!(terms.iter().all(|(b, _)| b.dim() == dim), "monomial dimension mismatch");
        Self { dim, terms }
    }

    pub fn terms(&self) -> &[(MultiIndex, f64)] {
        &self.terms
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|(b, _)| b.order()).max().unwrap_or(0)
    }

    /// `∫_{[0,1]^s}`
    pub fn integral(&self) -> f64 {
        self.terms.iter().map(|(b, a)| a * b.0.iter().map(|&e| 1.0 / (e as f64 + 1.0)).product::<f64>()).sum()
    }
}

impl Integrand for Polynomial {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, u: &[f64]) -> f64 {
        self.terms.iter().map(|(b, a)| a * b.monomial(u)).sum()
    }
}

impl DerivativeOracle for Polynomial {
    fn derivative(&self, alpha: &MultiIndex, x: &[f64]) -> Option<f64> {
        let mut acc = 0.0;
        for (b, a) in &self.terms {
            if b.0.iter().zip(&alpha.0).any(|(e, d)| d > e) {
                continue;
            }
            let mut t = *a;
            for ((&e, &d), &xi) in b.0.iter().zip(&alpha.0).zip(x) {
                let falling: f64 = ((e - d + 1)..=e).map(|v| v as f64).product();
                t *= falling * xi.powi((e - d) as i32);
            }
            acc += t;
        }
        Some(acc)
    }
}
