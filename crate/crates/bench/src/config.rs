//! Settings shared by the command line and config files.
//!
//! A config file holds one `key = value` pair per line; blank lines and
//! everything after `#` are ignored. Keys are the long flag names without
//! dashes (`fn`, `dataset`, `dim`, `r`, `k`, `reps`, `seed`, `tau`,
//! `variant`, `out`, `rel-mode`, `scale`, `zscore`, `mode`); `_` may stand
//! for `-`. List values (`r`, `k`, `variant`) are comma separated. Flags
//! given on the command line override the file.

use std::path::PathBuf;

use cubestrat::{Mode, ScaleConvention, Variant};

use crate::experiment::ExperimentConfig;
use crate::functions::WorkloadSpec;
use crate::{BenchError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub fn_id: Option<String>,
    pub dataset: Option<String>,
    pub dim: Option<String>,
    pub r: Option<String>,
    pub k: Option<String>,
    pub reps: Option<String>,
    pub seed: Option<String>,
    pub tau: Option<String>,
    pub variant: Option<String>,
    pub out: Option<String>,
    pub rel_mode: Option<String>,
    pub scale: Option<String>,
    pub zscore: Option<String>,
    pub mode: Option<String>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| BenchError::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

impl Settings {
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim().replace('_', "-");
            let value = Some(value.trim().to_string());
            let slot = match key.as_str() {
                "fn" => &mut s.fn_id,
                "dataset" => &mut s.dataset,
                "dim" => &mut s.dim,
                "r" => &mut s.r,
                "k" => &mut s.k,
                "reps" => &mut s.reps,
                "seed" => &mut s.seed,
                "tau" => &mut s.tau,
                "variant" => &mut s.variant,
                "out" => &mut s.out,
                "rel-mode" => &mut s.rel_mode,
                "scale" => &mut s.scale,
                "zscore" => &mut s.zscore,
                "mode" => &mut s.mode,
                other => return Err(BenchError::Config(format!("line {}: unknown key '{other}'", no + 1))),
            };
            *slot = value;
        }
        Ok(s)
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Self> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }

    /// `over`'s values win wherever present.
    pub fn overlay(self, over: Settings) -> Settings {
        Settings {
            fn_id: over.fn_id.or(self.fn_id),
            dataset: over.dataset.or(self.dataset),
            dim: over.dim.or(self.dim),
            r: over.r.or(self.r),
            k: over.k.or(self.k),
            reps: over.reps.or(self.reps),
            seed: over.seed.or(self.seed),
            tau: over.tau.or(self.tau),
            variant: over.variant.or(self.variant),
            out: over.out.or(self.out),
            rel_mode: over.rel_mode.or(self.rel_mode),
            scale: over.scale.or(self.scale),
            zscore: over.zscore.or(self.zscore),
            mode: over.mode.or(self.mode),
        }
    }

    pub fn workload_spec(&self) -> Result<WorkloadSpec> {
        let mut spec = WorkloadSpec::new(self.fn_id.as_deref().unwrap_or("fs"), parse("dim", self.dim.as_deref().unwrap_or("1"))?);
        spec.tau = parse("tau", self.tau.as_deref().unwrap_or("1.5"))?;
        spec.dataset = self.dataset.as_ref().map(PathBuf::from);
        spec.zscore = parse("zscore", self.zscore.as_deref().unwrap_or("false"))?;
        spec.scale = match self.scale.as_deref().map(str::trim) {
            None => None,
            Some("hessian") => Some(ScaleConvention::CholeskyOfHessian),
            Some("inverse-hessian") => Some(ScaleConvention::CholeskyOfInverseHessian),
            Some(other) => return Err(BenchError::Config(format!("scale: '{other}' is not hessian or inverse-hessian"))),
        };
        Ok(spec)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let variants = self
            .variant
            .as_deref()
            .unwrap_or("hat")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<Variant>().map_err(BenchError::from))
            .collect::<Result<Vec<_>>>()?;
        let mode = match self.mode.as_deref().map(str::trim).unwrap_or("free") {
            "free" => Mode::Free,
            "block" => Mode::Block,
            other => return Err(BenchError::Config(format!("mode: '{other}' is not free or block"))),
        };
        let config = ExperimentConfig {
            variants,
            r: parse_list("r", self.r.as_deref().unwrap_or("3"))?,
            k: parse_list("k", self.k.as_deref().unwrap_or("4,8,16,32,64"))?,
            reps: parse("reps", self.reps.as_deref().unwrap_or("50"))?,
            seed: parse("seed", self.seed.as_deref().unwrap_or("0"))?,
            rel_mode: self.rel_mode.as_deref().unwrap_or("auto").parse()?,
            mode,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn out_path(&self) -> Option<PathBuf> {
        self.out.as_ref().map(PathBuf::from)
    }
}
