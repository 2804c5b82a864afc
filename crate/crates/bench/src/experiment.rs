//! Estimator ladders over `k`, error statistics and CSV I/O.
//!
//! Output schema, one row per (variant, r, k):
//!
//! ```text
//! variant,r,k,n_evals,rel_error,discarded,slope_group
//! ```
//!
//! `n_evals` is the mean number of integrand calls per replicate,
//! `rel_error` the relative MSE or relative variance, and `discarded` is
//! `true` when `rel_error ≤ 1e-32` (the estimator was exact up to rounding).

use std::io::{Read, Write};

use rayon::prelude::*;

use cubestrat::{vanishing_grid, EstimatorConfig, GridSpec, Mode, StreamKey, Variant};

use crate::functions::Workload;
use crate::{BenchError, Result};

pub const DISCARD_THRESHOLD: f64 = 1e-32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelMode {
    /// MSE / I² when the integral is known, variance / mean² otherwise.
    #[default]
    Auto,
    /// MSE / I²
    Mse,
    /// MSE / |I|
    MseLiteral,
    /// sample variance / mean²
    Var,
}

impl std::str::FromStr for RelMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(RelMode::Auto),
            "mse" | "rel-mse" => Ok(RelMode::Mse),
            "mse-literal" => Ok(RelMode::MseLiteral),
            "var" | "rel-var" => Ok(RelMode::Var),
            other => Err(BenchError::Config(format!("unknown rel-mode '{other}' (auto, mse, mse-literal, var)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub r: Vec<usize>,
    /// Strictly increasing.
    pub k: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub rel_mode: RelMode,
    pub mode: Mode,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.r.is_empty() || self.k.is_empty() {
            return Err(BenchError::Config("variant, r and k lists must be non-empty".into()));
        }
        if self.k.windows(2).any(|w| w[0] >= w[1]) || self.k[0] == 0 {
            return Err(BenchError::Config("k list must be positive and strictly increasing".into()));
        }
        if self.r.contains(&0) {
            return Err(BenchError::Config("orders must be at least 1".into()));
        }
        if self.reps < 2 {
            return Err(BenchError::Config("need at least 2 replicates".into()));
        }
        Ok(())
    }

    /// (variant, r) pairs actually run: Haber and crude ignore `r`.
    pub fn ladders(&self) -> Vec<(Variant, usize)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            let rs: Vec<usize> = match v {
                Variant::Crude => vec![0],
                Variant::Haber1 => vec![1],
                Variant::Haber2 => vec![2],
                _ => self.r.clone(),
            };
            for r in rs {
                if !out.contains(&(v, r)) {
                    out.push((v, r));
                }
            }
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: Variant,
    pub r: usize,
    pub k: usize,
    pub n_evals: f64,
    pub rel_error: f64,
    pub discarded: bool,
    pub slope_group: String,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one (variant, r, k) cell; replicates are the stream ids.
pub fn derive_seed(master: u64, variant: Variant, r: usize, k: usize) -> u64 {
    [variant as u64, r as u64, k as u64].iter().fold(mix(master), |h, &x| mix(h ^ x))
}

pub fn slope_group(variant: Variant, r: usize) -> String {
    format!("{variant}-r{r}")
}

fn grid_for(variant: Variant, dim: usize, r: usize, k: usize) -> Result<GridSpec> {
    Ok(match variant {
        Variant::Vanishing => vanishing_grid(dim, k, r)?,
        _ => GridSpec::unit(dim, k)?,
    })
}

/// Values of `reps` independent replicates of one cell, with the mean
/// number of integrand calls.
pub fn replicate_values(workload: &Workload, variant: Variant, r: usize, k: usize, config: &ExperimentConfig) -> Result<(Vec<f64>, f64)> {
    let dim = workload.integrand.dim();
    let grid = grid_for(variant, dim, r, k)?;
    let est = EstimatorConfig::new(variant, r.max(1), grid).with_mode(config.mode);
    let seed = derive_seed(config.seed, variant, r, k);
    let f = workload.integrand.as_ref();
    let reports = (0..config.reps as u64)
        .map(|rep| {
            let key = StreamKey::new(seed, rep);
            match &workload.oracle {
                Some(o) => est.run_with_oracle(f, o.as_ref(), &key),
                None => est.run(f, &key),
            }
        })
        .collect::<cubestrat::Result<Vec<_>>>()?;
    let n = reports.iter().map(|r| r.n_evals() as f64).sum::<f64>() / reports.len() as f64;
    Ok((reports.into_iter().map(|r| r.value).collect(), n))
}

/// The relative error statistic of one cell.
pub fn rel_error(values: &[f64], exact: Option<f64>, mode: RelMode) -> Result<f64> {
    let l = values.len() as f64;
    let mean = values.iter().sum::<f64>() / l;
    let var = || values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (l - 1.0);
    let mse = |i: f64| values.iter().map(|v| (v - i).powi(2)).sum::<f64>() / l;
    Ok(match (mode, exact) {
        (RelMode::Auto | RelMode::Mse, Some(i)) => mse(i) / (i * i),
        (RelMode::MseLiteral, Some(i)) => mse(i) / i.abs(),
        (RelMode::Auto | RelMode::Var, _) => var() / (mean * mean),
        (_, None) => return Err(BenchError::Config("rel-mse needs an integrand with a known integral".into())),
    })
}

/// Runs every (variant, r, k) cell; rows come back sorted by variant, r, k.
pub fn run(config: &ExperimentConfig, workload: &Workload) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let cells: Vec<(Variant, usize, usize)> =
        config.ladders().into_iter().flat_map(|(v, r)| config.k.iter().map(move |&k| (v, r, k))).collect();
    let mut rows = cells
        .par_iter()
        .map(|&(variant, r, k)| {
            let (values, n_evals) = replicate_values(workload, variant, r, k, config)?;
            let rel = rel_error(&values, workload.exact, config.rel_mode)?;
            Ok(ResultRow {
                variant,
                r,
                k,
                n_evals,
                rel_error: rel,
                discarded: rel <= DISCARD_THRESHOLD,
                slope_group: slope_group(variant, r),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|a| (a.variant, a.r, a.k));
    Ok(rows)
}

pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "r", "k", "n_evals", "rel_error", "discarded", "slope_group"])?;
    for row in rows {
        w.write_record([
            row.variant.name().to_string(),
            row.r.to_string(),
            row.k.to_string(),
            format!("{}", row.n_evals),
            format!("{:e}", row.rel_error),
            row.discarded.to_string(),
            row.slope_group.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(BenchError::Data(format!("expected 7 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| BenchError::Data(format!("bad number '{}'", &rec[i]))) };
        let int = |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| BenchError::Data(format!("bad integer '{}'", &rec[i]))) };
        rows.push(ResultRow {
            variant: rec[0].parse()?,
            r: int(1)?,
            k: int(2)?,
            n_evals: num(3)?,
            rel_error: num(4)?,
            discarded: rec[5].parse().map_err(|_| BenchError::Data(format!("bad flag '{}'", &rec[5])))?,
            slope_group: rec[6].to_string(),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(rel_error)` against `ln(n_evals)` over the
/// non-discarded rows.
pub fn fit_slope(rows: &[ResultRow]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| !r.discarded).map(|r| (r.n_evals.ln(), r.rel_error.ln())).collect();
    if pts.len() < 3 {
        return Err(BenchError::Data(format!("slope needs at least 3 usable rows, got {}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(BenchError::Data("all rows have the same n".into()));
    }
    Ok(sxy / sxx)
}

/// Slopes per `slope_group`, in first-appearance order.
pub fn group_slopes(rows: &[ResultRow]) -> Vec<(String, Result<f64>)> {
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.slope_group) {
            groups.push(r.slope_group.clone());
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let sub: Vec<ResultRow> = rows.iter().filter(|r| r.slope_group == g).cloned().collect();
            let slope = fit_slope(&sub);
            (g, slope)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderRow {
    pub k: usize,
    pub r: usize,
    pub pooled_mean: f64,
    pub v_hat: f64,
    pub n_evals: f64,
    pub selected: bool,
}

/// Order selection for the vanishing estimator at every `k`, with orders
/// up to `max(config.r)`.
pub fn run_orders(config: &ExperimentConfig, workload: &Workload) -> Result<Vec<OrderRow>> {
    config.validate()?;
    let r_max = *config.r.iter().max().expect("validated");
    let mut rows = Vec::new();
    for &k in &config.k {
        let seed = derive_seed(config.seed, Variant::Vanishing, r_max, k);
        let sel = cubestrat::select_order(workload.integrand.as_ref(), r_max, k, config.reps, seed)?;
        for o in &sel.per_order {
            rows.push(OrderRow {
                k,
                r: o.r,
                pooled_mean: o.summary.pooled_mean,
                v_hat: o.summary.v_hat,
                n_evals: o.n_in_domain.iter().sum::<usize>() as f64 / o.n_in_domain.len() as f64,
                selected: o.r == sel.best,
            });
        }
    }
    Ok(rows)
}

pub fn write_orders<W: Write>(rows: &[OrderRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "r", "pooled_mean", "v_hat", "n_evals", "selected"])?;
    for row in rows {
        w.write_record([
            row.k.to_string(),
            row.r.to_string(),
            format!("{:e}", row.pooled_mean),
            format!("{:e}", row.v_hat),
            format!("{}", row.n_evals),
            row.selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
