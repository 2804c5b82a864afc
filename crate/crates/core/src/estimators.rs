//! Integral estimators over `[0,1]^s`.
//!
//! Every stratified estimator is a sum over strata `k^{-s} Σ_c Y_c`. The
//! terms `Y_c` are computed in parallel and then added sequentially in
//! lexicographic stratum order, so a report is bit-identical whatever the
//! thread count. Randomness for stratum `c` comes only from
//! `StreamKey::stratum_rng(c)`, so two estimators run with the same key see
//! the same offsets `U_c`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrand::{DerivativeOracle, FnIntegrand, Integrand};
use crate::lattice::{GridSpec, StreamKey};
use crate::stencil::{block_partition, MultiIndex, StencilBuilder, StencilMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Crude,
    Haber1,
    Haber2,
    Star,
    Hat,
    Tilde,
    Vanishing,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Crude, Variant::Haber1, Variant::Haber2, Variant::Star, Variant::Hat, Variant::Tilde, Variant::Vanishing];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Crude => "crude",
            Variant::Haber1 => "haber1",
            Variant::Haber2 => "haber2",
            Variant::Star => "star",
            Variant::Hat => "hat",
            Variant::Tilde => "tilde",
            Variant::Vanishing => "vanishing",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Precondition(format!("unknown estimator variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub variant: Variant,
    pub r: usize,
    pub grid: GridSpec,
    pub seed: u64,
    pub replicate: u64,
    pub value: f64,
    /// Evaluations at fixed points (cube centres).
    pub n_deterministic: usize,
    /// Evaluations at random points, counting exterior points of the
    /// vanishing estimator that never reach the integrand.
    pub n_random: usize,
    /// Calls actually made to the integrand.
    pub n_in_domain: usize,
    /// `value = term_scale * Σ_i Y_i`.
    pub term_scale: f64,
    pub per_stratum_terms: Option<Vec<f64>>,
    /// Vanishing estimator only: `A_j = k^{-s} Σ_c f̄(c + λ_j U_c)`.
    pub partial_averages: Option<Vec<f64>>,
}

impl EstimateReport {
    pub fn n_evals(&self) -> usize {
        self.n_in_domain
    }
}

/// `d_k(i) = E[V^i]` for `V ~ U[-1/2k, 1/2k]`.
pub fn d_moment(i: usize, k: usize) -> f64 {
    if i % 2 == 1 {
        0.0
    } else {
        1.0 / ((i as f64 + 1.0) * (2.0 * k as f64).powi(i as i32))
    }
}

/// `E[U^α]` for `U` uniform on a cube of side `1/k`.
pub fn centred_moment(alpha: &MultiIndex, k: usize) -> f64 {
    alpha.0.iter().map(|&a| d_moment(a, k)).product()
}

/// Dilations `λ = (1, -1, 3, -3, …)` and weights `γ` with `Σ γ_j = 1` and
/// `Σ γ_j λ_j^i = 0` for `1 ≤ i < r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCoefficients {
    pub lambdas: Vec<i64>,
    pub gammas: Vec<f64>,
}

impl LambdaCoefficients {
    pub fn r(&self) -> usize {
        self.lambdas.len()
    }

    /// Margin `m_r` of the grid the vanishing estimator of order `r` runs on.
    pub fn margin(&self) -> usize {
        vanishing_margin(self.r())
    }
}

pub fn vanishing_margin(r: usize) -> usize {
    if r % 2 == 1 {
        r
    } else {
        r - 1
    }
}

/// Grid `𝔠_{m_r,k}` used by the vanishing estimator of order `r`.
pub fn vanishing_grid(dim: usize, k: usize, r: usize) -> Result<GridSpec> {
    if r == 0 {
        return Err(Error::Precondition("order must be at least 1".into()));
    }
    GridSpec::new(dim, k, vanishing_margin(r))
}

pub fn lambda_coeffs(r: usize) -> LambdaCoefficients {
    assert!((1..=64).contains(&r), "order must lie in 1..=64");
    let lambdas: Vec<i64> = (0..r as i64).map(|j| if j % 2 == 0 { j + 1 } else { -j }).collect();
    // γ_j is the Lagrange basis polynomial of node λ_j evaluated at 0.
    let gammas = (0..r)
        .map(|j| {
            let others = lambdas.iter().enumerate().filter(|&(m, _)| m != j).map(|(_, &lm)| (lm as i128, (lm - lambdas[j]) as i128));
            let mut exact = Some((1i128, 1i128));
            for (a, b) in others.clone() {
                exact = exact.and_then(|(num, den)| {
                    let (num, den) = (num.checked_mul(a)?, den.checked_mul(b)?);
                    let g = gcd(num, den).max(1);
                    Some((num / g, den / g))
                });
            }
            match exact {
                Some((num, den)) => num as f64 / den as f64,
                None => others.fold(1.0, |acc, (a, b)| acc * (a as f64 / b as f64)),
            }
        })
        .collect();
    LambdaCoefficients { lambdas, gammas }
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Window length the hat estimator uses for its stencils. In free mode an
/// odd order borrows the window of the next even order when the grid is
/// wide enough, which makes orders `2q-1` and `2q` coincide.
pub fn hat_stencil_order(r: usize, k: usize, mode: &StencilMode) -> usize {
    match mode {
        StencilMode::Free if r % 2 == 1 && r >= 3 && k > r => r + 1,
        _ => r,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Free,
    Block,
}

/// Everything that determines an estimator apart from the stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub variant: Variant,
    pub r: usize,
    pub grid: GridSpec,
    pub mode: Mode,
    pub keep_terms: bool,
    /// Sample size of crude Monte Carlo; defaults to `k^s`.
    pub crude_samples: Option<usize>,
}

impl EstimatorConfig {
    pub fn new(variant: Variant, r: usize, grid: GridSpec) -> Self {
        Self { variant, r, grid, mode: Mode::Free, keep_terms: false, crude_samples: None }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn keep_terms(mut self, keep: bool) -> Self {
        self.keep_terms = keep;
        self
    }

    pub fn crude_samples(mut self, n: usize) -> Self {
        self.crude_samples = Some(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if self.r == 0 {
            return Err(Error::Precondition("order must be at least 1".into()));
        }
        match self.variant {
            Variant::Vanishing => {
                if g.margin() != vanishing_margin(self.r) {
                    return Err(Error::Precondition(format!(
                        "vanishing estimator of order {} needs margin {}, grid has {}",
                        self.r,
                        vanishing_margin(self.r),
                        g.margin()
                    )));
                }
            }
            Variant::Crude => {
                if self.crude_samples == Some(0) {
                    return Err(Error::Precondition("crude Monte Carlo needs n ≥ 1".into()));
                }
            }
            _ => {
                if g.margin() != 0 {
                    return Err(Error::Precondition(format!("{} needs a grid without margin", self.variant)));
                }
            }
        }
        if matches!(self.variant, Variant::Hat | Variant::Tilde) && self.r >= 2 && g.k() < self.r {
            return Err(Error::Resolution { k: g.k(), needed: self.r });
        }
        Ok(())
    }

    /// Runs every variant except `Star`, which needs a derivative oracle.
    pub fn run<F: Integrand + ?Sized>(&self, f: &F, key: &StreamKey) -> Result<EstimateReport> {
        self.validate()?;
        check_dim(f.dim(), &self.grid)?;
        let keep = self.keep_terms;
        let g = &self.grid;
        match self.variant {
            Variant::Crude => crude_impl(f, self.crude_samples.unwrap_or(g.num_inner()), key, keep),
            Variant::Haber1 => haber_impl(f, g, key, 1, keep),
            Variant::Haber2 => haber_impl(f, g, key, 2, keep),
            Variant::Star => Err(Error::Precondition("the star estimator needs a derivative oracle".into())),
            Variant::Hat => {
                let builder = hat_builder(g, self.r, self.mode)?;
                hat_impl(f, builder.as_ref(), self.r, g, key, keep)
            }
            Variant::Tilde => {
                let builder = tilde_builder(g, self.r, self.mode)?;
                tilde_impl(f, builder.as_ref(), self.r, g, key, keep)
            }
            Variant::Vanishing => vanishing_impl(f, self.r, g, key, keep),
        }
    }

    pub fn run_with_oracle<F: Integrand + ?Sized, O: DerivativeOracle + ?Sized>(
        &self,
        f: &F,
        oracle: &O,
        key: &StreamKey,
    ) -> Result<EstimateReport> {
        if self.variant == Variant::Star {
            self.validate()?;
            check_dim(f.dim(), &self.grid)?;
            star_impl(f, oracle, self.r, &self.grid, key, self.keep_terms)
        } else {
            self.run(f, key)
        }
    }
}

fn check_dim(dim: usize, grid: &GridSpec) -> Result<()> {
    if dim != grid.dim() {
        return Err(Error::Precondition(format!("integrand dimension {dim} does not match grid dimension {}", grid.dim())));
    }
    Ok(())
}

fn stencil_mode(grid: &GridSpec, r: usize, mode: Mode) -> Result<StencilMode> {
    Ok(match mode {
        Mode::Free => StencilMode::Free,
        Mode::Block => StencilMode::Block(block_partition(grid, r)?),
    })
}

fn hat_builder(grid: &GridSpec, r: usize, mode: Mode) -> Result<Option<StencilBuilder>> {
    if r < 3 {
        return Ok(None);
    }
    let sm = stencil_mode(grid, r, mode)?;
    let w = hat_stencil_order(r, grid.k(), &sm);
    Ok(Some(StencilBuilder::with_window_order(*grid, r, w, sm)?))
}

fn tilde_builder(grid: &GridSpec, r: usize, mode: Mode) -> Result<Option<StencilBuilder>> {
    if r < 2 {
        return Ok(None);
    }
    let sm = stencil_mode(grid, r, mode)?;
    Ok(Some(StencilBuilder::new(*grid, r, sm)?))
}

struct Scratch {
    j: Vec<i64>,
    u: Vec<f64>,
    x: Vec<f64>,
    nodes: Vec<i64>,
}

impl Scratch {
    fn new(s: usize) -> Self {
        Self { j: vec![0; s], u: vec![0.0; s], x: vec![0.0; s], nodes: vec![0; s] }
    }
}

/// Runs `body` for every stratum of `grid` in parallel, returning results in
/// lexicographic order. `body` sees the stratum index in `Scratch::j`.
fn per_stratum<T, B>(grid: &GridSpec, body: B) -> Result<Vec<T>>
where
    T: Send,
    B: Fn(&mut Scratch) -> Result<T> + Sync,
{
    let s = grid.dim();
    (0..grid.num_centres())
        .into_par_iter()
        .map_init(
            || Scratch::new(s),
            |sc, flat| {
                grid.write_index(flat, &mut sc.j);
                body(sc)
            },
        )
        .collect()
}

fn finite(x: &[f64], v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { point: x.to_vec(), value: v })
    }
}

/// `f(c + λ U_c)`, with `U_c` already in `sc.u`.
fn eval_at<F: Integrand + ?Sized>(f: &F, grid: &GridSpec, sc: &mut Scratch, lambda: f64) -> Result<f64> {
    for ((x, &j), &u) in sc.x.iter_mut().zip(&sc.j).zip(&sc.u) {
        *x = grid.coordinate(j) + lambda * u;
    }
    finite(&sc.x, f.eval(&sc.x))
}

/// `f̄(c + λ U_c)`: zero, without calling `f`, outside the closed unit cube.
fn eval_bar<F: Integrand + ?Sized>(f: &F, grid: &GridSpec, sc: &mut Scratch, lambda: f64) -> Result<Option<f64>> {
    for ((x, &j), &u) in sc.x.iter_mut().zip(&sc.j).zip(&sc.u) {
        *x = grid.coordinate(j) + lambda * u;
    }
    if sc.x.iter().all(|v| (0.0..=1.0).contains(v)) {
        finite(&sc.x, f.eval(&sc.x)).map(Some)
    } else {
        Ok(None)
    }
}

fn centre_values<F: Integrand + ?Sized>(f: &F, grid: &GridSpec) -> Result<Vec<f64>> {
    per_stratum(grid, |sc| {
        for (x, &j) in sc.x.iter_mut().zip(&sc.j) {
            *x = grid.coordinate(j);
        }
        finite(&sc.x, f.eval(&sc.x))
    })
}

pub(crate) fn fold_sum(terms: &[f64]) -> f64 {
    terms.iter().fold(0.0, |acc, &t| acc + t)
}

struct Counts {
    det: usize,
    random: usize,
    in_domain: usize,
}

#[allow(clippy::too_many_arguments)]
fn report(
    variant: Variant,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
    terms: Vec<f64>,
    scale: f64,
    keep: bool,
    counts: Counts,
) -> EstimateReport {
    let value = scale * fold_sum(&terms);
    EstimateReport {
        variant,
        r,
        grid: *grid,
        seed: key.seed(),
        replicate: key.replicate(),
        value,
        n_deterministic: counts.det,
        n_random: counts.random,
        n_in_domain: counts.in_domain,
        term_scale: scale,
        per_stratum_terms: keep.then_some(terms),
        partial_averages: None,
    }
}

fn crude_impl<F: Integrand + ?Sized>(f: &F, n: usize, key: &StreamKey, keep: bool) -> Result<EstimateReport> {
    let s = f.dim();
    let mut rng = key.global_rng();
    let mut x = vec![0.0; s];
    let mut terms = Vec::with_capacity(n);
    for _ in 0..n {
        for xi in x.iter_mut() {
            *xi = rng.random::<f64>();
        }
        terms.push(finite(&x, f.eval(&x))?);
    }
    let grid = GridSpec::unit(s.max(1), 1)?;
    Ok(report(Variant::Crude, 0, &grid, key, terms, 1.0 / n as f64, keep, Counts { det: 0, random: n, in_domain: n }))
}

/// Plain Monte Carlo with `n` uniform points, on the key's global stream.
pub fn crude<F: Integrand + ?Sized>(f: &F, n: usize, key: &StreamKey) -> Result<EstimateReport> {
    if n == 0 {
        return Err(Error::Precondition("crude Monte Carlo needs n ≥ 1".into()));
    }
    crude_impl(f, n, key, false)
}

fn haber_impl<F: Integrand + ?Sized>(f: &F, grid: &GridSpec, key: &StreamKey, order: usize, keep: bool) -> Result<EstimateReport> {
    let terms = per_stratum(grid, |sc| {
        grid.fill_offset(&sc.j, key, &mut sc.u);
        if order == 1 {
            eval_at(f, grid, sc, 1.0)
        } else {
            let a = eval_at(f, grid, sc, 1.0)?;
            let b = eval_at(f, grid, sc, -1.0)?;
            Ok((a + b) / 2.0)
        }
    })?;
    let n = order * grid.num_centres();
    let variant = if order == 1 { Variant::Haber1 } else { Variant::Haber2 };
    Ok(report(variant, order, grid, key, terms, grid.cell_volume(), keep, Counts { det: 0, random: n, in_domain: n }))
}

fn require_unit(grid: &GridSpec, what: &str) -> Result<()> {
    if grid.margin() != 0 {
        return Err(Error::Precondition(format!("{what} needs a grid without margin")));
    }
    Ok(())
}

/// `k^{-s} Σ_c f(c + U_c)`.
pub fn haber1<F: Integrand + ?Sized>(f: &F, grid: &GridSpec, key: &StreamKey) -> Result<EstimateReport> {
    require_unit(grid, "haber1")?;
    check_dim(f.dim(), grid)?;
    haber_impl(f, grid, key, 1, false)
}

/// `k^{-s} Σ_c (f(c + U_c) + f(c - U_c)) / 2`.
pub fn haber2<F: Integrand + ?Sized>(f: &F, grid: &GridSpec, key: &StreamKey) -> Result<EstimateReport> {
    require_unit(grid, "haber2")?;
    check_dim(f.dim(), grid)?;
    haber_impl(f, grid, key, 2, false)
}

/// One control-variate monomial: `coef(c) · (U^α − E[U^α]) / α!`.
#[derive(Debug, Clone)]
struct CvTerm {
    alpha: MultiIndex,
    inv_fact: f64,
    moment: f64,
    scale: f64,
}

fn cv_terms(s: usize, k: usize, orders: impl IntoIterator<Item = usize>) -> Vec<CvTerm> {
    let mut out = Vec::new();
    for l in orders {
        for alpha in MultiIndex::all_of_order(s, l) {
            out.push(CvTerm {
                inv_fact: 1.0 / alpha.factorial(),
                moment: centred_moment(&alpha, k),
                scale: (k as f64).powi(l as i32),
                alpha,
            });
        }
    }
    out
}

fn even_orders(r: usize) -> impl Iterator<Item = usize> {
    (1..r).filter(|l| l % 2 == 0)
}

fn star_impl<F: Integrand + ?Sized, O: DerivativeOracle + ?Sized>(
    f: &F,
    oracle: &O,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
    keep: bool,
) -> Result<EstimateReport> {
    let terms_cv = cv_terms(grid.dim(), grid.k(), even_orders(r));
    let terms = per_stratum(grid, |sc| {
        grid.fill_offset(&sc.j, key, &mut sc.u);
        let a = eval_at(f, grid, sc, 1.0)?;
        let b = eval_at(f, grid, sc, -1.0)?;
        let g = (a + b) / 2.0;
        for (x, &j) in sc.x.iter_mut().zip(&sc.j) {
            *x = grid.coordinate(j);
        }
        let mut cv = 0.0;
        for t in &terms_cv {
            let d = oracle.derivative(&t.alpha, &sc.x).ok_or_else(|| Error::Oracle { alpha: t.alpha.0.clone() })?;
            cv += d * t.inv_fact * (t.alpha.monomial(&sc.u) - t.moment);
        }
        Ok(g - cv)
    })?;
    let n = 2 * grid.num_centres();
    Ok(report(Variant::Star, r, grid, key, terms, grid.cell_volume(), keep, Counts { det: 0, random: n, in_domain: n }))
}

/// Haber II corrected by the exact Taylor control variates of even order
/// `< r`, with derivatives at the centres supplied by `oracle`.
pub fn estimate_star<F: Integrand + ?Sized, O: DerivativeOracle + ?Sized>(
    f: &F,
    oracle: &O,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
) -> Result<EstimateReport> {
    EstimatorConfig::new(Variant::Star, r, *grid).run_with_oracle(f, oracle, key)
}

/// `Σ_t D̂^{α_t} f(c) · coef_t` for one stratum.
fn stencil_cv(
    builder: &StencilBuilder,
    terms_cv: &[CvTerm],
    grid: &GridSpec,
    values: &[f64],
    sc: &mut Scratch,
) -> Result<f64> {
    let mut cv = 0.0;
    for t in terms_cv {
        let pattern = builder.pattern(&t.alpha, &sc.j)?;
        let d = t.scale * pattern.weighted_sum(grid, &sc.j, values, &mut sc.nodes);
        cv += d * t.inv_fact * (t.alpha.monomial(&sc.u) - t.moment);
    }
    Ok(cv)
}

fn hat_impl<F: Integrand + ?Sized>(
    f: &F,
    builder: Option<&StencilBuilder>,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
    keep: bool,
) -> Result<EstimateReport> {
    let nc = grid.num_centres();
    let (terms, det) = match builder {
        None => {
            let t = per_stratum(grid, |sc| {
                grid.fill_offset(&sc.j, key, &mut sc.u);
                let a = eval_at(f, grid, sc, 1.0)?;
                let b = eval_at(f, grid, sc, -1.0)?;
                Ok((a + b) / 2.0)
            })?;
            (t, 0)
        }
        Some(builder) => {
            let values = centre_values(f, grid)?;
            let terms_cv = cv_terms(grid.dim(), grid.k(), even_orders(r));
            let t = per_stratum(grid, |sc| {
                grid.fill_offset(&sc.j, key, &mut sc.u);
                let a = eval_at(f, grid, sc, 1.0)?;
                let b = eval_at(f, grid, sc, -1.0)?;
                let g = (a + b) / 2.0;
                Ok(g - stencil_cv(builder, &terms_cv, grid, &values, sc)?)
            })?;
            (t, nc)
        }
    };
    let counts = Counts { det, random: 2 * nc, in_domain: det + 2 * nc };
    Ok(report(Variant::Hat, r, grid, key, terms, grid.cell_volume(), keep, counts))
}

/// The symmetric estimator: Haber II minus stencil control variates of
/// even order `< r`. Uses `k^s` centre evaluations plus `2k^s` random ones.
pub fn estimate_hat<F: Integrand + ?Sized>(f: &F, r: usize, grid: &GridSpec, key: &StreamKey) -> Result<EstimateReport> {
    EstimatorConfig::new(Variant::Hat, r, *grid).run(f, key)
}

fn tilde_impl<F: Integrand + ?Sized>(
    f: &F,
    builder: Option<&StencilBuilder>,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
    keep: bool,
) -> Result<EstimateReport> {
    let nc = grid.num_centres();
    let values = match builder {
        Some(_) => centre_values(f, grid)?,
        None => Vec::new(),
    };
    let terms_cv = cv_terms(grid.dim(), grid.k(), 1..r);
    let terms = per_stratum(grid, |sc| {
        grid.fill_offset(&sc.j, key, &mut sc.u);
        let g = eval_at(f, grid, sc, 1.0)?;
        let cv = match builder {
            Some(b) => stencil_cv(b, &terms_cv, grid, &values, sc)?,
            None => 0.0,
        };
        Ok(g - cv)
    })?;
    let det = if builder.is_some() { nc } else { 0 };
    let counts = Counts { det, random: nc, in_domain: det + nc };
    Ok(report(Variant::Tilde, r, grid, key, terms, grid.cell_volume(), keep, counts))
}

/// One random evaluation per stratum, corrected by stencil control variates
/// of every order `1 ≤ |α| < r`. Uses `2k^s` evaluations.
pub fn estimate_tilde<F: Integrand + ?Sized>(f: &F, r: usize, grid: &GridSpec, key: &StreamKey) -> Result<EstimateReport> {
    EstimatorConfig::new(Variant::Tilde, r, *grid).run(f, key)
}

/// `f̄(c + λ_j U_c)` for `j < r` on every stratum of `grid`, stratum-major,
/// with exterior points stored as exact zeros, and the number of integrand
/// calls made for each `j`.
pub(crate) fn shifted_values<F: Integrand + ?Sized>(
    f: &F,
    r: usize,
    grid: &GridSpec,
    key: &StreamKey,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let lc = lambda_coeffs(r);
    let rows = per_stratum(grid, |sc| {
        grid.fill_offset(&sc.j, key, &mut sc.u);
        let mut row = Vec::with_capacity(r);
        let mut hits = 0u64;
        for (j, &l) in lc.lambdas.iter().enumerate() {
            match eval_bar(f, grid, sc, l as f64)? {
                Some(v) => {
                    hits |= 1 << j;
                    row.push(v);
                }
                None => row.push(0.0),
            }
        }
        Ok((row, hits))
    })?;
    let mut calls = vec![0usize; r];
    for (_, hits) in &rows {
        for (j, c) in calls.iter_mut().enumerate() {
            *c += ((hits >> j) & 1) as usize;
        }
    }
    Ok((rows.into_iter().flat_map(|(row, _)| row).collect(), calls))
}

/// Per-stratum term of the order-`r` vanishing estimator from the stored
/// shifted values of one stratum (at least `r` of them).
pub(crate) fn vanishing_term(gammas: &[f64], row: &[f64]) -> f64 {
    gammas.iter().zip(row).fold(0.0, |acc, (g, v)| acc + g * v)
}

/// `A_j = k^{-s} Σ_c f̄(c + λ_j U_c)` from stratum-major shifted values.
pub(crate) fn partial_averages(values: &[f64], width: usize, r: usize, scale: f64) -> Vec<f64> {
    (0..r).map(|j| scale * values.chunks_exact(width).fold(0.0, |acc, row| acc + row[j])).collect()
}

fn vanishing_impl<F: Integrand + ?Sized>(f: &F, r: usize, grid: &GridSpec, key: &StreamKey, keep: bool) -> Result<EstimateReport> {
    let (values, calls) = shifted_values(f, r, grid, key)?;
    let lc = lambda_coeffs(r);
    let terms: Vec<f64> = values.chunks_exact(r).map(|row| vanishing_term(&lc.gammas, row)).collect();
    let scale = grid.cell_volume();
    let counts = Counts { det: 0, random: r * grid.num_centres(), in_domain: calls.iter().sum() };
    let mut rep = report(Variant::Vanishing, r, grid, key, terms, scale, keep, counts);
    rep.partial_averages = Some(partial_averages(&values, r, r, scale));
    Ok(rep)
}

/// The estimator for integrands that vanish with their derivatives on the
/// boundary: `k^{-s} Σ_{c ∈ 𝔠_{m_r,k}} Σ_j γ_j f̄(c + λ_j U_c)`. `grid` must
/// carry margin `m_r`; `f` is never called outside `[0,1]^s`.
pub fn estimate_vanishing<F: Integrand + ?Sized>(f: &F, r: usize, grid: &GridSpec, key: &StreamKey) -> Result<EstimateReport> {
    EstimatorConfig::new(Variant::Vanishing, r, *grid).run(f, key)
}

/// `k^{-s} Σ_{c ∈ 𝔠_{m,k}} ḡ(c + λ U_c)`, unbiased for `∫ g` when `λ` is odd
/// and `m ≥ (|λ| - 1)/2`.
pub fn unbiased_shifted_sum<F: Integrand + ?Sized>(g: &F, lambda: i64, grid: &GridSpec, key: &StreamKey) -> Result<f64> {
    if lambda % 2 == 0 {
        return Err(Error::Precondition(format!("λ={lambda} must be odd")));
    }
    let need = ((lambda.unsigned_abs() - 1) / 2) as usize;
    if grid.margin() < need {
        return Err(Error::Precondition(format!("λ={lambda} needs margin ≥ {need}, grid has {}", grid.margin())));
    }
    check_dim(g.dim(), grid)?;
    let terms = per_stratum(grid, |sc| {
        grid.fill_offset(&sc.j, key, &mut sc.u);
        Ok(eval_bar(g, grid, sc, lambda as f64)?.unwrap_or(0.0))
    })?;
    Ok(grid.cell_volume() * fold_sum(&terms))
}

/// Random weights `W_{c'}` of the centre values in the hat or tilde
/// estimator: `value = k^{-s} (Σ_c g_c − Σ_{c'} W_{c'} f(c'))`, where `g_c` is
/// the random part of stratum `c`.
pub fn control_variate_weights(config: &EstimatorConfig, key: &StreamKey) -> Result<Vec<f64>> {
    config.validate()?;
    let grid = &config.grid;
    let (builder, orders): (Option<StencilBuilder>, Vec<usize>) = match config.variant {
        Variant::Hat => (hat_builder(grid, config.r, config.mode)?, even_orders(config.r).collect()),
        Variant::Tilde => (tilde_builder(grid, config.r, config.mode)?, (1..config.r).collect()),
        v => return Err(Error::Precondition(format!("{v} has no stencil control variates"))),
    };
    let mut w = vec![0.0; grid.num_centres()];
    let Some(builder) = builder else { return Ok(w) };
    let terms_cv = cv_terms(grid.dim(), grid.k(), orders);
    let mut u = vec![0.0; grid.dim()];
    let mut node = vec![0i64; grid.dim()];
    for idx in grid.indices() {
        grid.fill_offset(&idx.0, key, &mut u);
        for t in &terms_cv {
            let coef = t.scale * t.inv_fact * (t.alpha.monomial(&u) - t.moment);
            let pattern = builder.pattern(&t.alpha, &idx.0)?;
            for (q, &wq) in pattern.weights().iter().enumerate() {
                for ((n, &c), &o) in node.iter_mut().zip(&idx.0).zip(pattern.offset(q)) {
                    *n = c + o;
                }
                w[grid.flat_index_unchecked(&node)] += coef * wq;
            }
        }
    }
    Ok(w)
}

/// Diagnostic estimate of the limit of `k^{s+2r} Var(Î_{r,k}(f))` for
/// block-local stencils.
///
/// Covariances between the estimators applied to the monomials
/// `(u - 1/2)^α`, `|α| = r`, on the single-block grid `k = r` come from
/// `budget` joint replicates; the integrals `∫ D^α f D^{α'} f` from a tensor
/// midpoint rule with `points_per_axis^s` nodes.
pub fn asymptotic_variance_estimate<O: DerivativeOracle + ?Sized>(
    dim: usize,
    oracle: &O,
    r: usize,
    budget: usize,
    points_per_axis: usize,
    seed: u64,
) -> Result<f64> {
    if r == 0 || budget < 2 || points_per_axis == 0 {
        return Err(Error::Precondition("need r ≥ 1, budget ≥ 2 and a non-empty quadrature".into()));
    }
    let alphas = MultiIndex::all_of_order(dim, r);
    let na = alphas.len();

    let quad = GridSpec::unit(dim, points_per_axis)?;
    let mut derivs = vec![0.0; na * quad.num_centres()];
    for (q, x) in quad.centres().enumerate() {
        for (a, alpha) in alphas.iter().enumerate() {
            derivs[a * quad.num_centres() + q] =
                oracle.derivative(alpha, &x).ok_or_else(|| Error::Oracle { alpha: alpha.0.clone() })?;
        }
    }
    let nq = quad.num_centres();
    let cross = |a: usize, b: usize| -> f64 {
        let da = &derivs[a * nq..(a + 1) * nq];
        let db = &derivs[b * nq..(b + 1) * nq];
        quad.cell_volume() * da.iter().zip(db).fold(0.0, |acc, (x, y)| acc + x * y)
    };

    let grid = GridSpec::unit(dim, r)?;
    let builder = hat_builder(&grid, r, Mode::Block)?;
    let monomials: Vec<_> = alphas
        .iter()
        .map(|alpha| {
            let alpha = alpha.clone();
            FnIntegrand::new(dim, move |u: &[f64]| alpha.0.iter().zip(u).map(|(&a, &x)| (x - 0.5).powi(a as i32)).product())
        })
        .collect();
    let samples: Vec<Vec<f64>> = (0..budget as u64)
        .into_par_iter()
        .map(|rep| {
            let key = StreamKey::new(seed, rep);
            monomials.iter().map(|g| hat_impl(g, builder.as_ref(), r, &grid, &key, false).map(|e| e.value)).collect()
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = (0..na).map(|a| samples.iter().map(|s| s[a]).sum::<f64>() / budget as f64).collect();
    let cov = |a: usize, b: usize| {
        samples.iter().map(|s| (s[a] - means[a]) * (s[b] - means[b])).sum::<f64>() / (budget - 1) as f64
    };

    let mut total = 0.0;
    for a in 0..na {
        for b in 0..na {
            total += cov(a, b) / (alphas[a].factorial() * alphas[b].factorial()) * cross(a, b);
        }
    }
    Ok((r as f64).powi((2 * r + dim) as i32) * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrand::{FnOracle, Polynomial, ZeroOracle};
    use approx::assert_relative_eq;

    fn unit(s: usize, k: usize) -> GridSpec {
        GridSpec::unit(s, k).unwrap()
    }

    fn f1() -> FnIntegrand<impl Fn(&[f64]) -> f64 + Sync + Clone> {
        FnIntegrand::new(1, |u: &[f64]| u[0] * u[0].exp())
    }

    #[test]
    fn moments() {
        assert_eq!(d_moment(0, 5), 1.0);
        assert_eq!(d_moment(1, 3), 0.0);
        assert_relative_eq!(d_moment(2, 1), 1.0 / 12.0);
        assert_relative_eq!(d_moment(2, 2), 1.0 / 48.0);
    }

    #[test]
    fn lambda_coefficients() {
        assert_eq!(lambda_coeffs(1).gammas, vec![1.0]);
        assert_eq!(lambda_coeffs(2).gammas, vec![0.5, 0.5]);
        let l4 = lambda_coeffs(4);
        assert_eq!(l4.lambdas, vec![1, -1, 3, -3]);
        assert_eq!(l4.gammas, vec![9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0, -1.0 / 16.0]);
        for r in 1..=9 {
            let lc = lambda_coeffs(r);
            assert!((lc.gammas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 1..r as i32 {
                let m: f64 = lc.gammas.iter().zip(&lc.lambdas).map(|(g, &l)| g * (l as f64).powi(i)).sum();
                assert!(m.abs() < 1e-12 * (r as f64).powi(i), "r={r} i={i} m={m}");
            }
        }
        assert_eq!((lambda_coeffs(3).margin(), lambda_coeffs(4).margin()), (3, 3));
    }

    #[test]
    fn constants_are_exact() {
        let f = FnIntegrand::new(2, |_: &[f64]| 2.5);
        let g = unit(2, 5);
        let key = StreamKey::new(1, 0);
        assert_eq!(haber1(&f, &g, &key).unwrap().value, 2.5);
        assert_eq!(haber2(&f, &g, &key).unwrap().value, 2.5);
        assert_eq!(crude(&f, 17, &key).unwrap().value, 2.5);
    }

    #[test]
    fn haber2_exact_on_affine() {
        let f = FnIntegrand::new(2, |u: &[f64]| 1.0 + 2.0 * u[0] - 3.0 * u[1]);
        for rep in 0..5 {
            let v = haber2(&f, &unit(2, 7), &StreamKey::new(3, rep)).unwrap().value;
            assert_relative_eq!(v, 0.5, epsilon = 1e-13);
        }
    }

    #[test]
    fn counts() {
        let f = f1();
        let g = unit(1, 8);
        let key = StreamKey::new(0, 0);
        let h = estimate_hat(&f, 4, &g, &key).unwrap();
        assert_eq!((h.n_deterministic, h.n_random, h.n_in_domain), (8, 16, 24));
        let t = estimate_tilde(&f, 3, &g, &key).unwrap();
        assert_eq!((t.n_deterministic, t.n_random), (8, 8));
        let vg = vanishing_grid(1, 8, 3).unwrap();
        let v = estimate_vanishing(&f, 3, &vg, &key).unwrap();
        assert_eq!(v.n_random, 3 * 14);
        assert!(v.n_in_domain <= v.n_random);
    }

    #[test]
    fn preconditions() {
        let f = f1();
        let key = StreamKey::new(0, 0);
        assert!(matches!(estimate_hat(&f, 4, &unit(1, 3), &key), Err(Error::Resolution { .. })));
        assert!(matches!(estimate_tilde(&f, 3, &unit(1, 2), &key), Err(Error::Resolution { .. })));
        assert!(matches!(estimate_vanishing(&f, 3, &unit(1, 8), &key), Err(Error::Precondition(_))));
        assert!(matches!(haber1(&f, &GridSpec::new(1, 4, 1).unwrap(), &key), Err(Error::Precondition(_))));
        assert!(matches!(unbiased_shifted_sum(&f, 3, &unit(1, 4), &key), Err(Error::Precondition(_))));
        assert!(matches!(unbiased_shifted_sum(&f, 2, &GridSpec::new(1, 4, 3).unwrap(), &key), Err(Error::Precondition(_))));
        assert!(matches!(EstimatorConfig::new(Variant::Star, 3, unit(1, 4)).run(&f, &key), Err(Error::Precondition(_))));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let f = FnIntegrand::new(1, |u: &[f64]| 1.0 / (u[0] - u[0]));
        assert!(matches!(haber1(&f, &unit(1, 4), &StreamKey::new(0, 0)), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn equivalences_bit_exact() {
        let f = FnIntegrand::new(2, |u: &[f64]| (u[0] * u[1]).exp() * u[1]);
        let g = unit(2, 6);
        for rep in 0..3 {
            let key = StreamKey::new(11, rep);
            let h1 = haber1(&f, &g, &key).unwrap().value;
            let h2 = haber2(&f, &g, &key).unwrap().value;
            assert_eq!(estimate_tilde(&f, 1, &g, &key).unwrap().value.to_bits(), h1.to_bits());
            assert_eq!(estimate_vanishing(&f, 1, &vanishing_grid(2, 6, 1).unwrap(), &key).unwrap().value.to_bits(), h1.to_bits());
            assert_eq!(estimate_vanishing(&f, 2, &vanishing_grid(2, 6, 2).unwrap(), &key).unwrap().value.to_bits(), h2.to_bits());
            assert_eq!(estimate_hat(&f, 2, &g, &key).unwrap().value.to_bits(), h2.to_bits());
            for q in 2..=3 {
                let odd = estimate_hat(&f, 2 * q - 1, &g, &key).unwrap().value;
                let even = estimate_hat(&f, 2 * q, &g, &key).unwrap().value;
                assert_eq!(odd.to_bits(), even.to_bits());
            }
            assert_eq!(estimate_star(&f, &ZeroOracle, 4, &g, &key).unwrap().value.to_bits(), h2.to_bits());
        }
    }

    #[test]
    fn polynomial_exactness_small() {
        // (1 + u0 + u1)^3 expanded, degree 3 < r = 4
        let terms = vec![
            (MultiIndex(vec![0, 0]), 1.0),
            (MultiIndex(vec![1, 0]), 3.0),
            (MultiIndex(vec![0, 1]), 3.0),
            (MultiIndex(vec![2, 0]), 3.0),
            (MultiIndex(vec![0, 2]), 3.0),
            (MultiIndex(vec![1, 1]), 6.0),
            (MultiIndex(vec![3, 0]), 1.0),
            (MultiIndex(vec![0, 3]), 1.0),
            (MultiIndex(vec![2, 1]), 3.0),
            (MultiIndex(vec![1, 2]), 3.0),
        ];
        let p = Polynomial::new(2, terms);
        let exact = p.integral();
        let g = unit(2, 6);
        for rep in 0..4 {
            let key = StreamKey::new(5, rep);
            for v in [
                estimate_hat(&p, 4, &g, &key).unwrap().value,
                estimate_tilde(&p, 4, &g, &key).unwrap().value,
                estimate_star(&p, &p, 4, &g, &key).unwrap().value,
                EstimatorConfig::new(Variant::Hat, 4, g).with_mode(Mode::Block).run(&p, &key).unwrap().value,
            ] {
                assert_relative_eq!(v, exact, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn report_value_matches_terms() {
        let f = f1();
        let g = unit(1, 9);
        let key = StreamKey::new(2, 2);
        for variant in [Variant::Haber1, Variant::Hat, Variant::Tilde] {
            let rep = EstimatorConfig::new(variant, 3, g).keep_terms(true).run(&f, &key).unwrap();
            let terms = rep.per_stratum_terms.as_ref().unwrap();
            assert_eq!(terms.len(), 9);
            assert_eq!(rep.value, rep.term_scale * fold_sum(terms));
        }
        assert!(estimate_hat(&f, 3, &g, &key).unwrap().per_stratum_terms.is_none());
    }

    #[test]
    fn weights_view_reproduces_value() {
        let f = FnIntegrand::new(2, |u: &[f64]| (u[0] + 2.0 * u[1]).sin());
        let g = unit(2, 7);
        let key = StreamKey::new(8, 1);
        for (variant, r) in [(Variant::Hat, 5), (Variant::Tilde, 3)] {
            let cfg = EstimatorConfig::new(variant, r, g);
            let value = cfg.run(&f, &key).unwrap().value;
            let w = control_variate_weights(&cfg, &key).unwrap();
            let fc: Vec<f64> = g.centres().map(|c| f.eval(&c)).collect();
            let random: f64 = if variant == Variant::Hat {
                haber2(&f, &g, &key).unwrap().value
            } else {
                haber1(&f, &g, &key).unwrap().value
            };
            let alt = random - g.cell_volume() * w.iter().zip(&fc).map(|(a, b)| a * b).sum::<f64>();
            assert_relative_eq!(value, alt, max_relative = 1e-12);
        }
    }

    #[test]
    fn vanishing_never_calls_outside() {
        let f = FnIntegrand::new(2, |u: &[f64]| {
            assert!(u.iter().all(|x| (0.0..=1.0).contains(x)));
            1.0
        });
        let g = vanishing_grid(2, 5, 3).unwrap();
        let rep = estimate_vanishing(&f, 3, &g, &StreamKey::new(4, 0)).unwrap();
        let pa = rep.partial_averages.unwrap();
        assert_eq!(pa.len(), 3);
        let n = rep.n_in_domain;
        assert!((3 * 25..=3 * 11 * 11).contains(&n));
    }

    #[test]
    fn star_with_polynomial_oracle() {
        let p = Polynomial::new(1, vec![(MultiIndex(vec![2]), 1.0), (MultiIndex(vec![3]), -2.0)]);
        let fo = FnOracle(|a: &MultiIndex, x: &[f64]| p.derivative(a, x));
        let v = estimate_star(&p, &fo, 4, &unit(1, 5), &StreamKey::new(0, 3)).unwrap().value;
        assert_relative_eq!(v, p.integral(), max_relative = 1e-12);
    }

    #[test]
    fn asymptotic_variance_of_polynomial_is_zero() {
        let p = Polynomial::new(1, vec![(MultiIndex(vec![1]), 1.0)]);
        let v = asymptotic_variance_estimate(1, &p, 2, 50, 64, 0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn asymptotic_variance_r2_closed_form() {
        // For r = 2, s = 1 the estimate is 8 Var(U^2) / 2 · ∫ f''^2 with U
        // uniform on [-1/4, 1/4], i.e. ∫ f''^2 / 720.
        let oracle = FnOracle(|_: &MultiIndex, _: &[f64]| Some(1.0));
        let v = asymptotic_variance_estimate(1, &oracle, 2, 20_000, 8, 3).unwrap();
        assert_relative_eq!(v, 1.0 / 720.0, max_relative = 0.05);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
