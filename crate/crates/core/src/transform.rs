//! Mapping integrals over `ℝ^s` to integrands on `[0,1]^s` that vanish on
//! the boundary, and a Laplace-style recentring for log-densities.
//!
//! With `ψ(u) = (2u - 1) / (u(1-u))^τ` applied per axis,
//! `∫_{ℝ^s} g = ∫_{[0,1]^s} g(ψ_s(u)) Π_i ψ'(u_i) du`. When `g` decays fast
//! enough the transformed integrand and its derivatives vanish on the
//! boundary, which is what the vanishing estimator needs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrand::Integrand;

/// `ψ(u)` on one axis.
pub fn psi1(u: f64, tau: f64) -> f64 {
    (2.0 * u - 1.0) / (u * (1.0 - u)).powf(tau)
}

/// `ψ'(u)` on one axis.
pub fn psi1_prime(u: f64, tau: f64) -> f64 {
    let p = u * (1.0 - u);
    let d = 2.0 * u - 1.0;
    2.0 / p.powf(tau) + tau * d * d / p.powf(tau + 1.0)
}

/// Solves `ψ(u) = x` by bisection.
pub fn psi1_inverse(x: f64, tau: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi1(mid, tau) < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn interior(u: &[f64]) -> Result<()> {
    if u.iter().all(|&x| x > 0.0 && x < 1.0) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { point: u.to_vec() })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("τ={tau} must be positive")))
    }
}

/// `ψ_s(u)`, componentwise.
pub fn psi(u: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    interior(u)?;
    Ok(u.iter().map(|&x| psi1(x, tau)).collect())
}

/// `Π_i ψ'(u_i)`, the Jacobian determinant of `ψ_s`.
pub fn jacobian_factor(u: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    interior(u)?;
    Ok(u.iter().map(|&x| psi1_prime(x, tau)).product())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiTransform {
    dim: usize,
    tau: f64,
}

impl PsiTransform {
    pub fn new(dim: usize, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if dim == 0 {
            return Err(Error::Precondition("dimension must be positive".into()));
        }
        Ok(Self { dim, tau })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn psi(&self, u: &[f64]) -> Result<Vec<f64>> {
        psi(u, self.tau)
    }

    pub fn jacobian_factor(&self, u: &[f64]) -> Result<f64> {
        jacobian_factor(u, self.tau)
    }

    /// Writes `ψ_s(u)` into `x` and returns the Jacobian factor, or `None`
    /// when `u` touches the boundary.
    fn map_into(&self, u: &[f64], x: &mut [f64]) -> Option<f64> {
        let mut jac = 1.0;
        for (xi, &ui) in x.iter_mut().zip(u) {
            if !(ui > 0.0 && ui < 1.0) {
                return None;
            }
            *xi = psi1(ui, self.tau);
            jac *= psi1_prime(ui, self.tau);
        }
        Some(jac)
    }
}

/// `f(u) = g(ψ_s(u)) Π_i ψ'(u_i)` on `(0,1)^s`, zero on the boundary.
#[derive(Debug, Clone)]
pub struct VanishingIntegrand<G> {
    g: G,
    transform: PsiTransform,
}

/// Wraps an integrand on `ℝ^s`. The caller is responsible for `g` decaying
/// fast enough for the result to be smooth at the boundary.
pub fn wrap<G: Integrand>(g: G, tau: f64) -> Result<VanishingIntegrand<G>> {
    let transform = PsiTransform::new(g.dim(), tau)?;
    Ok(VanishingIntegrand { g, transform })
}

impl<G> VanishingIntegrand<G> {
    pub fn transform(&self) -> &PsiTransform {
        &self.transform
    }

    pub fn inner(&self) -> &G {
        &self.g
    }
}

impl<G: Integrand> Integrand for VanishingIntegrand<G> {
    fn dim(&self) -> usize {
        self.transform.dim
    }

    fn eval(&self, u: &[f64]) -> f64 {
        let mut x = vec![0.0; u.len()];
        let Some(jac) = self.transform.map_into(u, &mut x) else { return 0.0 };
        let v = self.g.eval(&x);
        // g underflows before the factor overflows; avoid 0 · ∞
        if v == 0.0 {
            0.0
        } else {
            v * jac
        }
    }
}

/// A twice differentiable log-density `h` on `ℝ^s`. Derivatives default to
/// central finite differences.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        numeric_gradient(|y| self.log_density(y), x)
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        numeric_hessian(|y| self.gradient(y), x)
    }
}

impl<T: LogDensity + ?Sized> LogDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (**self).log_density(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (**self).gradient(x)
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).hessian(x)
    }
}

fn step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

pub fn numeric_gradient(h: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let e = step(x[i], 6e-6);
            y[i] = x[i] + e;
            let up = h(&y);
            y[i] = x[i] - e;
            let down = h(&y);
            y[i] = x[i];
            (up - down) / (2.0 * e)
        })
        .collect()
}

/// Symmetrised central differences of a gradient.
pub fn numeric_hessian(grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> DMatrix<f64> {
    let s = x.len();
    let mut m = DMatrix::zeros(s, s);
    let mut y = x.to_vec();
    for j in 0..s {
        let e = step(x[j], 1e-4);
        y[j] = x[j] + e;
        let up = grad(&y);
        y[j] = x[j] - e;
        let down = grad(&y);
        y[j] = x[j];
        for i in 0..s {
            m[(i, j)] = (up[i] - down[i]) / (2.0 * e);
        }
    }
    (&m + m.transpose()) * 0.5
}

/// Which Cholesky factor rescales the transformed coordinates, with `H` the
/// negated Hessian of `h` at the mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleConvention {
    /// `L Lᵀ = H`
    CholeskyOfHessian,
    /// `L Lᵀ = H^{-1}`, the usual Laplace covariance.
    CholeskyOfInverseHessian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceOptions {
    pub convention: ScaleConvention,
    pub tau: f64,
    /// Mode search stops once `‖∇h‖_∞` falls below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Evaluate `exp(h - h(β̂))` instead of `exp(h)`, keeping values near 1
    /// for peaked posteriors. The integral is then rescaled by `exp(h(β̂))`.
    pub subtract_mode_value: bool,
}

impl LaplaceOptions {
    pub fn new(convention: ScaleConvention) -> Self {
        Self { convention, tau: 1.5, gradient_tolerance: 1e-8, max_iterations: 500, subtract_mode_value: false }
    }

    pub fn tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn subtract_mode_value(mut self, on: bool) -> Self {
        self.subtract_mode_value = on;
        self
    }
}

/// `u ↦ exp(h(β̂ + L ψ_s(u)) - offset) |det L| Π ψ'(u_i)`.
#[derive(Debug, Clone)]
pub struct LaplaceIntegrand<H> {
    h: H,
    mode: DVector<f64>,
    scale: DMatrix<f64>,
    abs_det: f64,
    log_offset: f64,
    transform: PsiTransform,
}

impl<H> LaplaceIntegrand<H> {
    /// `∫ exp(h) = exp(log_offset) · ∫_{[0,1]^s} self`.
    pub fn log_offset(&self) -> f64 {
        self.log_offset
    }
}

impl<H: LogDensity> Integrand for LaplaceIntegrand<H> {
    fn dim(&self) -> usize {
        self.transform.dim
    }

    fn eval(&self, u: &[f64]) -> f64 {
        let mut x = vec![0.0; u.len()];
        let Some(jac) = self.transform.map_into(u, &mut x) else { return 0.0 };
        let beta = &self.mode + &self.scale * DVector::from_vec(x);
        let e = (self.h.log_density(beta.as_slice()) - self.log_offset).exp();
        if e == 0.0 {
            0.0
        } else {
            e * self.abs_det * jac
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaplaceFit<H> {
    pub mode: Vec<f64>,
    /// `H = -∇²h(β̂)`
    pub hessian: DMatrix<f64>,
    pub scale: DMatrix<f64>,
    pub abs_det: f64,
    pub iterations: usize,
    pub trace: ModeTrace,
    pub integrand: LaplaceIntegrand<H>,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// `(iteration, h, ‖∇h‖_∞)` per iterate.
pub type ModeTrace = Vec<(usize, f64, f64)>;

/// Maximises `h` from `guess` by damped Newton ascent with backtracking,
/// falling back to the gradient direction where `-∇²h` is not positive
/// definite.
pub fn find_mode<H: LogDensity + ?Sized>(
    h: &H,
    guess: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, usize, ModeTrace)> {
    if guess.len() != h.dim() {
        return Err(Error::Precondition("mode guess has the wrong dimension".into()));
    }
    let mut x = guess.to_vec();
    let mut fx = h.log_density(&x);
    let mut trace = Vec::new();
    for it in 0..=max_iterations {
        let g = h.gradient(&x);
        let gnorm = max_norm(&g);
        trace.push((it, fx, gnorm));
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        if gnorm < tolerance {
            return Ok((x, it, trace));
        }
        if it == max_iterations {
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let neg_hess = -h.hessian(&x);
        let dir = match neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&gv),
            None => gv.clone(),
        };
        let slope = gv.dot(&dir);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let y: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let fy = h.log_density(&y);
            if fy.is_finite() && fy >= fx + 1e-4 * t * slope {
                // accept also pure-rounding stalls near the optimum
                moved = y != x;
                x = y;
                fx = fy;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            let g = h.gradient(&x);
            trace.push((it + 1, fx, max_norm(&g)));
            if max_norm(&g) < tolerance {
                return Ok((x, it + 1, trace));
            }
            break;
        }
    }
    let gradient_norm = trace.last().map_or(f64::NAN, |t| t.2);
    Err(Error::Optimization { iterations: trace.len().saturating_sub(1), gradient_norm, trace })
}

/// Finds the mode `β̂` of `h`, factors `H = -∇²h(β̂)` and builds the
/// transformed integrand whose integral over `[0,1]^s` is `∫ exp(h)`
/// (times `exp(-h(β̂))` when `subtract_mode_value` is set).
pub fn laplace_reparametrize<H: LogDensity>(h: H, mode_guess: &[f64], options: &LaplaceOptions) -> Result<LaplaceFit<H>> {
    let transform = PsiTransform::new(h.dim(), options.tau)?;
    let (mode, iterations, trace) = find_mode(&h, mode_guess, options.gradient_tolerance, options.max_iterations)?;
    let hessian = -h.hessian(&mode);
    let chol = hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("negated Hessian at the mode".into()))?;
    let scale = match options.convention {
        ScaleConvention::CholeskyOfHessian => chol.l(),
        ScaleConvention::CholeskyOfInverseHessian => chol
            .inverse()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("inverse of the negated Hessian".into()))?
            .l(),
    };
    let abs_det = scale.diagonal().iter().map(|d| d.abs()).product();
    let log_offset = if options.subtract_mode_value { h.log_density(&mode) } else { 0.0 };
    let integrand = LaplaceIntegrand {
        h,
        mode: DVector::from_column_slice(&mode),
        scale: scale.clone(),
        abs_det,
        log_offset,
        transform,
    };
    Ok(LaplaceFit { mode, hessian, scale, abs_det, iterations, trace, integrand })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{estimate_vanishing, vanishing_grid};
    use crate::integrand::FnIntegrand;
    use crate::lattice::StreamKey;
    use approx::assert_relative_eq;

    fn gauss(s: usize) -> FnIntegrand<impl Fn(&[f64]) -> f64 + Sync + Clone> {
        FnIntegrand::new(s, move |x: &[f64]| {
            let q: f64 = x.iter().map(|v| v * v).sum();
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI).powf(x.len() as f64 / 2.0)
        })
    }

    #[test]
    fn psi_examples() {
        assert_eq!(psi(&[0.5, 0.5], 1.5).unwrap(), vec![0.0, 0.0]);
        assert_relative_eq!(psi(&[0.75], 1.0).unwrap()[0], 8.0 / 3.0, max_relative = 1e-15);
        assert!(psi1(0.6, 1.5) < psi1(0.7, 1.5));
        assert!(matches!(psi(&[0.0], 1.5), Err(Error::OutOfDomain { .. })));
        assert!(matches!(jacobian_factor(&[1.0], 1.5), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn jacobian_examples() {
        assert_relative_eq!(jacobian_factor(&[0.5], 1.5).unwrap(), 16.0, max_relative = 1e-15);
        let h = 1e-5;
        let fd = (psi1(0.3 + h, 1.5) - psi1(0.3 - h, 1.5)) / (2.0 * h);
        assert_relative_eq!(jacobian_factor(&[0.3], 1.5).unwrap(), fd, max_relative = 1e-6);
        let floor = 2.0 * 4f64.powf(1.5);
        for i in 1..1000 {
            assert!(psi1_prime(i as f64 / 1000.0, 1.5) >= floor * (1.0 - 1e-14));
        }
    }

    #[test]
    fn inverse_round_trip() {
        for i in 0..=40 {
            let x = -10.0 + i as f64 * 0.5;
            let u = psi1_inverse(x, 1.5);
            assert!((psi1(u, 1.5) - x).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn wrapped_boundary_behaviour() {
        let f = wrap(gauss(1), 1.5).unwrap();
        assert_eq!(f.eval(&[0.0]), 0.0);
        assert_eq!(f.eval(&[1.0]), 0.0);
        assert!(f.eval(&[1e-3]) < 1e-6 * f.eval(&[0.5]));
        let zero = wrap(FnIntegrand::new(2, |_: &[f64]| 0.0), 1.5).unwrap();
        assert_eq!(zero.eval(&[0.3, 0.4]), 0.0);
    }

    #[test]
    fn change_of_variables_by_quadrature() {
        // hat function supported on [-1, 1], integral 1
        let g = FnIntegrand::new(1, |x: &[f64]| (1.0 - x[0].abs()).max(0.0));
        let f = wrap(g, 1.0).unwrap();
        let n = 200_000;
        let q: f64 = (0..n).map(|i| f.eval(&[(i as f64 + 0.5) / n as f64])).sum::<f64>() / n as f64;
        assert!((q - 1.0).abs() < 1e-4, "{q}");
    }

    #[test]
    fn wrapped_gaussian_integrates_to_one() {
        let f = wrap(gauss(1), 1.5).unwrap();
        let grid = vanishing_grid(1, 64, 3).unwrap();
        let vals: Vec<f64> =
            (0..200).map(|rep| estimate_vanishing(&f, 3, &grid, &StreamKey::new(4, rep)).unwrap().value).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * sd / (vals.len() as f64).sqrt() + 1e-12, "{mean} {sd}");
    }

    struct Quadratic;

    impl LogDensity for Quadratic {
        fn dim(&self) -> usize {
            2
        }

        fn log_density(&self, x: &[f64]) -> f64 {
            -0.5 * (x[0] * x[0] + x[1] * x[1])
        }
    }

    #[test]
    fn mode_of_quadratic() {
        let (m, _, _) = find_mode(&Quadratic, &[3.0, -2.0], 1e-8, 100).unwrap();
        assert!(max_norm(&m) < 1e-8);
    }

    #[test]
    fn non_convergence_reports_trace() {
        struct Linear;
        impl LogDensity for Linear {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                x[0]
            }
            fn gradient(&self, _: &[f64]) -> Vec<f64> {
                vec![1.0]
            }
            fn hessian(&self, _: &[f64]) -> DMatrix<f64> {
                DMatrix::zeros(1, 1)
            }
        }
        match find_mode(&Linear, &[0.0], 1e-8, 5) {
            Err(Error::Optimization { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scale_conventions() {
        struct Narrow;
        impl LogDensity for Narrow {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &[f64]) -> f64 {
                -2.0 * (x[0] - 1.0).powi(2)
            }
        }
        let a = laplace_reparametrize(Narrow, &[0.0], &LaplaceOptions::new(ScaleConvention::CholeskyOfHessian)).unwrap();
        let b = laplace_reparametrize(Narrow, &[0.0], &LaplaceOptions::new(ScaleConvention::CholeskyOfInverseHessian)).unwrap();
        assert_relative_eq!(a.mode[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(a.scale[(0, 0)], 2.0, max_relative = 1e-6);
        assert_relative_eq!(b.scale[(0, 0)], 0.5, max_relative = 1e-6);
    }
}
