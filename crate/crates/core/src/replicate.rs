//! Independent replicates: variance estimation, pooling, the tail bound and
//! order selection for the vanishing estimator.

use crate::error::{Error, Result};
use crate::estimators::{
    fold_sum, lambda_coeffs, partial_averages, shifted_values, vanishing_grid, vanishing_term, EstimateReport, EstimatorConfig, Variant,
};
use crate::integrand::{DerivativeOracle, Integrand};
use crate::lattice::StreamKey;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub l: usize,
    /// One estimate per replicate, in replicate order.
    pub values: Vec<f64>,
    pub pooled_mean: f64,
    /// Estimated variance of a single replicate.
    pub v_hat: f64,
    /// `v_hat / l`, the estimated variance of `pooled_mean`.
    pub pooled_variance: f64,
}

/// Runs `config` on replicates `0..l` of `seed`, keeping per-stratum terms.
pub fn run_replicates<F: Integrand + ?Sized>(
    config: &EstimatorConfig,
    f: &F,
    seed: u64,
    l: usize,
) -> Result<Vec<EstimateReport>> {
    let cfg = config.keep_terms(true);
    (0..l as u64).map(|rep| cfg.run(f, &StreamKey::new(seed, rep))).collect()
}

/// [`run_replicates`] for estimators that need a derivative oracle.
pub fn run_replicates_with_oracle<F: Integrand + ?Sized, O: DerivativeOracle + ?Sized>(
    config: &EstimatorConfig,
    f: &F,
    oracle: &O,
    seed: u64,
    l: usize,
) -> Result<Vec<EstimateReport>> {
    let cfg = config.keep_terms(true);
    (0..l as u64).map(|rep| cfg.run_with_oracle(f, oracle, &StreamKey::new(seed, rep))).collect()
}

fn aligned_terms(reports: &[EstimateReport]) -> Result<(Vec<&[f64]>, f64)> {
    if reports.len() < 2 {
        return Err(Error::Alignment(format!("need at least 2 replicates, got {}", reports.len())));
    }
    let first = &reports[0];
    let mut cols = Vec::with_capacity(reports.len());
    for rep in reports {
        if rep.variant != first.variant || rep.r != first.r || rep.grid != first.grid || rep.term_scale != first.term_scale {
            return Err(Error::Alignment("replicates come from different configurations".into()));
        }
        let terms = rep
            .per_stratum_terms
            .as_deref()
            .ok_or_else(|| Error::Alignment("per-stratum terms were not retained".into()))?;
        if terms.len() != cols.first().map_or(terms.len(), |c: &&[f64]| c.len()) {
            return Err(Error::Alignment("replicates have different numbers of strata".into()));
        }
        cols.push(terms);
    }
    Ok((cols, first.term_scale))
}

/// `V̂ = scale^2 Σ_i (l-1)^{-1} Σ_j (Y_i^{(j)} - Ȳ_i)^2`, the unbiased estimate
/// of the variance of one replicate built from per-stratum sample variances.
pub fn variance_estimate(reports: &[EstimateReport]) -> Result<f64> {
    let (cols, scale) = aligned_terms(reports)?;
    let l = cols.len();
    let mut col = vec![0.0; l];
    let mut total = 0.0;
    for i in 0..cols[0].len() {
        for (c, terms) in col.iter_mut().zip(&cols) {
            *c = terms[i];
        }
        // sorted so the result does not depend on replicate labels
        col.sort_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / l as f64;
        let ss: f64 = col.iter().map(|y| (y - mean) * (y - mean)).sum();
        total += ss / (l - 1) as f64;
    }
    Ok(scale * scale * total)
}

pub fn pooled(reports: &[EstimateReport]) -> Result<ReplicateSummary> {
    let v_hat = variance_estimate(reports)?;
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let l = values.len();
    Ok(ReplicateSummary { l, pooled_mean: values.iter().sum::<f64>() / l as f64, values, v_hat, pooled_variance: v_hat / l as f64 })
}

/// Radius `n^{-1/2-r/s} Ĉ ‖f‖_r √(2 log(2/δ))` of the interval around one
/// estimate that contains the integral with probability at least `1 - δ`.
pub fn tail_bound(delta: f64, c_hat: f64, norm_r: f64, n: f64, r: usize, s: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Precondition(format!("δ={delta} must lie in (0,1)")));
    }
    if s == 0 || n <= 0.0 {
        return Err(Error::Precondition("need s ≥ 1 and n > 0".into()));
    }
    Ok(n.powf(-0.5 - r as f64 / s as f64) * c_hat * norm_r * (2.0 * (2.0 / delta).ln()).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderResult {
    pub r: usize,
    pub summary: ReplicateSummary,
    /// Integrand calls an order-`r` run makes, per replicate.
    pub n_in_domain: Vec<usize>,
    pub reports: Vec<EstimateReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderSelection {
    pub best: usize,
    pub per_order: Vec<OrderResult>,
    /// Integrand calls made in total, over all replicates.
    pub total_calls: usize,
}

impl OrderSelection {
    pub fn order(&self, r: usize) -> Option<&OrderResult> {
        self.per_order.iter().find(|o| o.r == r)
    }
}

/// Vanishing estimators of every order `1..=r_max` from one set of
/// evaluations per replicate, picking the order with the smallest `V̂`
/// (ties go to the lower order).
///
/// `f` must vanish on the boundary with its derivatives; this is not
/// checked. Replicate `j` uses `StreamKey::new(seed, j)`, so each order's
/// values equal standalone runs of [`crate::estimators::estimate_vanishing`]
/// with the same keys.
pub fn select_order<F: Integrand + ?Sized>(f: &F, r_max: usize, k: usize, l: usize, seed: u64) -> Result<OrderSelection> {
    if r_max == 0 || l < 2 {
        return Err(Error::Precondition("need r_max ≥ 1 and at least 2 replicates".into()));
    }
    let grid = vanishing_grid(f.dim(), k, r_max)?;
    let scale = grid.cell_volume();
    let coeffs: Vec<_> = (1..=r_max).map(lambda_coeffs).collect();
    let mut per_order: Vec<OrderResult> = (1..=r_max)
        .map(|r| OrderResult {
            r,
            summary: ReplicateSummary { l, values: vec![], pooled_mean: 0.0, v_hat: 0.0, pooled_variance: 0.0 },
            n_in_domain: Vec::with_capacity(l),
            reports: Vec::with_capacity(l),
        })
        .collect();
    let mut total_calls = 0;
    for rep in 0..l as u64 {
        let key = StreamKey::new(seed, rep);
        let (values, calls) = shifted_values(f, r_max, &grid, &key)?;
        total_calls += calls.iter().sum::<usize>();
        for (o, lc) in per_order.iter_mut().zip(&coeffs) {
            let r = o.r;
            let terms: Vec<f64> = values.chunks_exact(r_max).map(|row| vanishing_term(&lc.gammas, &row[..r])).collect();
            let in_domain = calls[..r].iter().sum();
            let value = scale * fold_sum(&terms);
            o.n_in_domain.push(in_domain);
            o.reports.push(EstimateReport {
                variant: Variant::Vanishing,
                r,
                grid,
                seed,
                replicate: rep,
                value,
                n_deterministic: 0,
                n_random: r * grid.num_centres(),
                n_in_domain: in_domain,
                term_scale: scale,
                per_stratum_terms: Some(terms),
                partial_averages: Some(partial_averages(&values, r_max, r, scale)),
            });
        }
    }
    let mut best = 1;
    let mut best_v = f64::INFINITY;
    for o in per_order.iter_mut() {
        o.summary = pooled(&o.reports)?;
        if o.summary.v_hat < best_v {
            best_v = o.summary.v_hat;
            best = o.r;
        }
    }
    Ok(OrderSelection { best, per_order, total_calls })
}
