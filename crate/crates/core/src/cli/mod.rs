//! The `mftp` command line: `analyze`, `simulate`, `fpca-diagnose`.

pub mod analyze;
pub mod config;
pub mod diagnose;
pub mod io;
mod report;
pub mod simulate;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Command, Overrides, PolicySpec, RunConfig};

use crate::error::{MftpError, Result};

#[derive(Debug, Parser)]
#[command(name = "mftp", version, about = "Causal effects of curve-valued treatments under modified treatment policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Estimate the mean outcome under a policy for an input CSV.
    Analyze(CommonArgs),
    /// Run simulation scenarios or write a simulated dataset.
    Simulate(CommonArgs),
    /// Fit FPCA and report the eigenvalue tail.
    #[command(name = "fpca-diagnose")]
    FpcaDiagnose(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// identity, scale_warp, or window_threshold.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Components balanced by the weight model.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Bootstrap resamples (0 skips intervals).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            input: self.input.clone(),
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
            policy: self.policy.clone(),
            tau: self.tau,
            k: self.k,
            folds: self.folds,
            bootstrap: self.bootstrap,
            alpha: self.alpha,
        }
    }
}

/// Parse the config file (if any) and merge the flags.
pub fn parse_config(command: Command, args: &CommonArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => config::read_file_config(p)?,
        None => config::FileConfig::default(),
    };
    config::resolve(command, file, args.overrides())
}

pub fn run(cli: Cli) -> Result<()> {
    let (command, args) = match &cli.command {
        CliCommand::Analyze(a) => (Command::Analyze, a),
        CliCommand::Simulate(a) => (Command::Simulate, a),
        CliCommand::FpcaDiagnose(a) => (Command::FpcaDiagnose, a),
    };
    let cfg = parse_config(command, args)?;
    run_config(&cfg)
}

/// Execute a resolved configuration on a pool sized by `threads`.
pub fn run_config(cfg: &RunConfig) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| MftpError::config("threads", e.to_string()))?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| MftpError::io(&cfg.out, e))?;
    pool.install(|| match cfg.command {
        Command::Analyze => analyze::run_analyze(cfg).map(|_| ()),
        Command::Simulate => simulate::run_simulate(cfg),
        Command::FpcaDiagnose => diagnose::run_diagnose(cfg).map(|_| ()),
    })
}
