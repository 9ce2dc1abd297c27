//! Command-line driver: train runs experiments from a TOML config, perf
//! evaluates the analytic bandwidth model, verify executes the acceptance
//! checks, ablate sweeps the embedding-adaptation / weight-projection grid.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Exit 2: configuration problems (parse errors, invalid combinations).
    Config(String),
    /// Exit 3: corpus missing or too small.
    Corpus(String),
    /// Exit 4: numerical failure during training.
    Numerical(String),
    /// Exit 5: usage errors (bad grids, empty filters).
    Usage(String),
    /// Exit 6: I/O failures writing artifacts.
    Io(String),
    /// Exit 7: internal invariant violation.
    Internal(String),
    /// Exit 1: verification failures.
    VerifyFailed(usize),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::VerifyFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Corpus(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Usage(_) => 5,
            CliError::Io(_) => 6,
            CliError::Internal(_) => 7,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("config error: {m}"),
            CliError::Corpus(m) => format!("corpus error: {m}"),
            CliError::Numerical(m) => format!("numerical failure: {m}"),
            CliError::Usage(m) => format!("usage error: {m}"),
            CliError::Io(m) => format!("io error: {m}"),
            CliError::Internal(m) => format!("internal error: {m}"),
            CliError::VerifyFailed(n) => format!("{n} verification check(s) failed"),
        }
    }
}

#[derive(Parser)]
#[command(name = "sparseloco", version, about = "Deterministic desk-scale heterogeneous SparseLoCo training")]
struct Cli {
    /// Worker threads (default: all cores). Results are identical at any
    /// thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override all seeds (model = N, data = N+1, basis = N+2).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the bandwidth/utilization model and write the sweep table.
    Perf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks (oracles, identities, trend gates).
    Verify {
        /// Run only checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Run the embedding-adaptation x weight-projection ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(config).map_err(CliError::Config)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    if let Some(n) = seed {
        cfg.override_seed(n);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.cmd {
        Cmd::Train { config, out, seed } => commands::cmd_train(&load(&config, out, seed)?),
        Cmd::Perf { config, out } => commands::cmd_perf(&load(&config, out, None)?),
        Cmd::Verify { filter } => commands::cmd_verify(filter.as_deref()),
        Cmd::Ablate { config, out, seed } => commands::cmd_ablate(&load(&config, out, seed)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
