use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cubestrat_bench::experiment::{group_slopes, read_rows, run, run_orders, write_orders, write_rows};
use cubestrat_bench::{build_workload, Settings};

#[derive(Parser)]
#[command(name = "cubestrat", version, about = "Stratified Monte Carlo estimator benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run estimator ladders over k and write one CSV row per (variant, r, k).
    Run(Flags),
    /// Fit log-log slopes per slope_group of a CSV written by `run`.
    Slope {
        /// CSV file; reads stdin when omitted.
        input: Option<PathBuf>,
    },
    /// Order selection for the vanishing estimator, orders 1..=max(r).
    Orders(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// key = value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Integrand: fs, poly2, gauss, bump or logistic.
    #[arg(long = "fn")]
    fn_id: Option<String>,
    /// CSV for the logistic workload.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    /// Comma-separated orders.
    #[arg(long)]
    r: Option<String>,
    /// Comma-separated, strictly increasing resolutions.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// Comma-separated: crude, haber1, haber2, star, hat, tilde, vanishing.
    #[arg(long)]
    variant: Option<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
    /// auto, mse, mse-literal or var.
    #[arg(long = "rel-mode")]
    rel_mode: Option<String>,
    /// Logistic scale matrix: hessian or inverse-hessian.
    #[arg(long)]
    scale: Option<String>,
    /// Standardise the dataset's predictors.
    #[arg(long)]
    zscore: bool,
    /// Stencil mode: free or block.
    #[arg(long)]
    mode: Option<String>,
}

impl Flags {
    fn settings(self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::from_config_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => Settings::default(),
        };
        let cli = Settings {
            fn_id: self.fn_id,
            dataset: self.dataset,
            dim: self.dim,
            r: self.r,
            k: self.k,
            reps: self.reps,
            seed: self.seed,
            tau: self.tau,
            variant: self.variant,
            out: self.out,
            rel_mode: self.rel_mode,
            scale: self.scale,
            zscore: self.zscore.then(|| "true".to_string()),
            mode: self.mode,
        };
        Ok(file.overlay(cli))
    }
}

fn output(settings: &Settings) -> Result<Box<dyn Write>> {
    Ok(match settings.out_path() {
        Some(p) => Box::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(flags) => {
            let settings = flags.settings()?;
            let config = settings.experiment()?;
            let workload = build_workload(&settings.workload_spec()?)?;
            let rows = run(&config, &workload)?;
            write_rows(&rows, output(&settings)?)?;
        }
        Command::Slope { input } => {
            let rows = match input {
                Some(p) => read_rows(File::open(&p).with_context(|| format!("opening {}", p.display()))?)?,
                None => read_rows(io::stdin().lock())?,
            };
            let mut out = io::stdout().lock();
            writeln!(out, "slope_group,slope")?;
            for (group, slope) in group_slopes(&rows) {
                match slope {
                    Ok(s) => writeln!(out, "{group},{s}")?,
                    Err(e) => writeln!(out, "{group},NaN # {e}")?,
                }
            }
        }
        Command::Orders(flags) => {
            let settings = flags.settings()?;
            let config = settings.experiment()?;
            let workload = build_workload(&settings.workload_spec()?)?;
            if !workload.vanishing {
                eprintln!("warning: '{}' does not vanish on the boundary", workload.name);
            }
            let rows = run_orders(&config, &workload)?;
            write_orders(&rows, output(&settings)?)?;
        }
    }
    Ok(())
}
