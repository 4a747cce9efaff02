//! Command-line driver: argument parsing, configs, output handling.
//!
//! Exit codes: 0 on success, 1 when a run finishes but an acceptance check
//! or numerical step fails, 2 for usage and configuration errors.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::output::OutputDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<prefix_moe::Error> for CliError {
    fn from(e: prefix_moe::Error) -> Self {
        match e {
            prefix_moe::Error::Optimization(_) => CliError::Failure(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("I/O error: {e}"))
    }
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The run completed but a check did not pass.
    Failure(String),
}

#[derive(Debug, Parser)]
#[command(name = "prefix-moe", version, about = "Prefix-tuning as mixture-of-experts: simulation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the attention/MoE decomposition on random instances.
    Equiv(Common),
    /// Run a convergence-rate sweep over sample sizes.
    Sweep(Common),
    /// Tabulate the slow-rate witness sequence for the non-shared setting.
    Witness(Common),
    /// Generate a synthetic regression dataset.
    Gen(Common),
    /// Fit a mixing measure to a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Compare the analytic gradient at the fitted point with central differences.
        #[arg(long)]
        grad_check: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate the config and print the plan without running.
    #[arg(long)]
    pub dry_run: bool,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Equiv(_) => "equiv",
            Command::Sweep(_) => "sweep",
            Command::Witness(_) => "witness",
            Command::Gen(_) => "gen",
            Command::Fit { .. } => "fit",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Equiv(c) | Command::Sweep(c) | Command::Witness(c) | Command::Gen(c) => c,
            Command::Fit { common, .. } => common,
        }
    }
}

/// Sizes the global thread pool from `PREFIX_MOE_THREADS` when set.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PREFIX_MOE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(format!("PREFIX_MOE_THREADS must be a positive integer, got {v:?}")))?;
    // a second call in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    init_threads()?;
    let common = cli.command.common();
    let mut out = OutputDir::new(&common.output_dir, common.force);
    let (outcome, text) = match &cli.command {
        Command::Equiv(c) => {
            let (mut cfg, text) = config::load::<config::EquivConfig>(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            (commands::equiv(&cfg, c.dry_run, &mut out)?, text)
        }
        Command::Sweep(c) => {
            let (mut cfg, text) = config::load::<config::SweepConfig>(&c.config)?;
            cfg.sweep.seed = c.seed.unwrap_or(cfg.sweep.seed);
            (commands::sweep(&cfg, c.dry_run, &mut out)?, text)
        }
        Command::Witness(c) => {
            let (mut cfg, text) = config::load::<config::WitnessConfig>(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            (commands::witness(&cfg, c.dry_run, &mut out)?, text)
        }
        Command::Gen(c) => {
            let (mut cfg, text) = config::load::<config::GenConfig>(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            (commands::gen(&cfg, c.dry_run, &mut out)?, text)
        }
        Command::Fit { common: c, grad_check } => {
            let (mut cfg, text) = config::load::<config::FitCliConfig>(&c.config)?;
            cfg.fit.seed = c.seed.unwrap_or(cfg.fit.seed);
            (commands::fit_cmd(&cfg, *grad_check, c.dry_run, &mut out)?, text)
        }
    };
    if !common.dry_run {
        out.finish(cli.command.name(), &common.config, &text, common.seed)?;
    }
    Ok(outcome)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::Failure(msg)) => {
            eprintln!("check failed: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
