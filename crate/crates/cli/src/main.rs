use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cep_cli::config::{parse_config, ExperimentKind, RunConfig};
use cep_cli::error::{CliError, CliResult};
use cep_cli::runs;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cep", version, about = "Energy-guided diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a diffusion prior on a 2-D dataset.
    TrainPrior(RunArgs),
    /// Train a guidance model for an energy or for class labels.
    TrainGuidance(RunArgs),
    /// Sample from a saved prior, optionally guided.
    Sample(RunArgs),
    /// Compare guidance methods across inverse temperatures.
    Compare2d(RunArgs),
    /// Run Q-guided policy optimization on the point-goal task.
    Qgpo(RunArgs),
    /// Evaluate the exact intermediate energy on a grid.
    OracleGrid(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the base seed and every seed derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &RunArgs, expected: ExperimentKind) -> CliResult<(RunConfig, PathBuf)> {
    let mut config = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    if config.kind != expected {
        log::warn!("config kind is {} but running {expected}", config.kind);
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::Config("no --out given and no output_dir in the config".into()))?;
    Ok((config, out))
}

fn dispatch(command: &Command) -> CliResult<PathBuf> {
    type Runner = fn(&RunConfig, &Path) -> CliResult<()>;
    let (args, kind, run): (&RunArgs, ExperimentKind, Runner) = match command {
        Command::TrainPrior(a) => (a, ExperimentKind::Prior, |c, o| runs::run_prior(c, o).map(drop)),
        Command::TrainGuidance(a) => (a, ExperimentKind::Guidance, |c, o| runs::run_guidance(c, o).map(drop)),
        Command::Sample(a) => (a, ExperimentKind::Sample, |c, o| runs::run_sample(c, o).map(drop)),
        Command::Compare2d(a) => (a, ExperimentKind::Compare2d, |c, o| runs::run_compare2d(c, o).map(drop)),
        Command::Qgpo(a) => (a, ExperimentKind::Qgpo, |c, o| runs::run_qgpo(c, o).map(drop)),
        Command::OracleGrid(a) => (a, ExperimentKind::OracleGrid, |c, o| runs::run_oracle_grid(c, o).map(drop)),
    };
    let (config, out) = load(args, kind)?;
    run(&config, &out)?;
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(out) => {
            log::info!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
