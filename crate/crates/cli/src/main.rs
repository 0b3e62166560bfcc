//! `dlyap`: cumulants, identification and constraint reports for graphical
//! VAR(1) models.

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "dlyap", version, about = "Cumulant tensors and identifiability of graphical VAR(1) models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    config: RunConfig,
}

#[derive(Debug, Clone, Copy, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Stationary cumulant tensors with their Lyapunov residuals.
    Cumulants,
    /// Recovers the edge weights and noise cumulants from a cumulant stack.
    Identify,
    /// Independence statements, star class, rank constraints and local identifiability.
    Analyze,
    /// Exponent matrix of the monomial parametrization of a tree.
    Toric,
    /// Table of the p_{x,y} polynomials.
    Ptable {
        #[arg(long, default_value_t = 3)]
        max: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct RunConfig {
    /// Graph JSON: `{"p": 2, "edges": [[0, 0], [0, 1]]}`, optional `weights` and `noise`.
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    /// Cumulant stack to identify from, instead of computing it from the graph file.
    #[arg(long, global = true)]
    pub stack: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Cumulant orders, a subset of 2, 3, 4.
    #[arg(long, global = true, value_delimiter = ',', default_value = "2,3,4")]
    pub orders: Vec<usize>,
    /// Random parameter draws per rank test.
    #[arg(long, global = true, default_value_t = 10)]
    pub trials: usize,
    /// Relative singular-value threshold for numeric rank.
    #[arg(long, global = true, default_value_t = 1e-12)]
    pub tol: f64,
    /// Relative threshold below which a closed-form denominator counts as zero.
    #[arg(long, global = true, default_value_t = 1e-12)]
    pub degeneracy: f64,
    /// Largest accepted relative forward residual after identification.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub residual_tol: f64,
    /// Spectral radius of sampled edge weights.
    #[arg(long, global = true, default_value_t = 0.6)]
    pub radius: f64,
    /// Largest vertex set scanned for rank constraints.
    #[arg(long, global = true, default_value_t = 2)]
    pub max_subset: usize,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Worker threads for rank sweeps; results do not depend on it.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl RunConfig {
    fn validate(&self) -> Result<(), Failure> {
        for (name, v) in [("tol", self.tol), ("degeneracy", self.degeneracy), ("residual-tol", self.residual_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Failure::input(format!("--{name} must be positive, got {v}")));
            }
        }
        if !(self.radius > 0.0 && self.radius < 1.0) {
            return Err(Failure::input(format!("--radius must lie in (0, 1), got {}", self.radius)));
        }
        if self.orders.is_empty() || self.orders.iter().any(|n| !(2..=4).contains(n)) {
            return Err(Failure::input(format!("--orders must be a subset of 2,3,4, got {:?}", self.orders)));
        }
        if self.trials == 0 {
            return Err(Failure::input("--trials must be at least 1"));
        }
        Ok(())
    }

    pub fn sorted_orders(&self) -> Vec<usize> {
        let mut o = self.orders.clone();
        o.sort_unstable();
        o.dedup();
        o
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn unstable(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn identification(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dlyap: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    cli.config.validate()?;
    if let Some(n) = cli.config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(e.to_string()))?;
    }
    commands::run(cli.command, &cli.config)
}
