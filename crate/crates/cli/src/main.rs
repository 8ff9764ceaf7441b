use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

mod commands;
mod config;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    Demo2d,
    Simulate,
    Noise,
    Estimate,
    Metrics,
    Convert,
    Featuremaps,
    Experiment,
}

/// Estimate velocity and diffusivity fields from concentration series.
#[derive(Parser, Debug)]
#[command(name = "pdeflow", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON config; an experiment manifest is accepted by `experiment` and
    /// re-runs the recorded configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `--set estimator.lr=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(pdeflow::Error),
    /// A re-run did not reproduce the recorded outputs.
    Mismatch(Vec<String>),
}

impl From<pdeflow::Error> for CliError {
    fn from(e: pdeflow::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Mismatch(_) => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Mismatch(p) => write!(f, "re-run differs from manifest: {}", p.join("; ")),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match commands::run(args.command, &commands::Common::from_args(&args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
