//! Command-line front end: configuration, pipelines, persistence, and
//! plot-data emission.

mod config;
mod pipelines;
mod plots;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Pipeline errors with their process exit codes: invalid configuration
/// exits 2, numerical failures exit 3, missing plot inputs exit 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerics(String),
    MissingOutput(String),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CliError::Numerics(msg) => write!(f, "numerical failure: {msg}"),
            CliError::MissingOutput(msg) => write!(f, "missing output: {msg}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<qbsde::CoreError> for CliError {
    fn from(e: qbsde::CoreError) -> Self {
        match e {
            qbsde::CoreError::Config(msg) => CliError::Config(msg),
            other => CliError::Numerics(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerics(_) => 3,
            CliError::MissingOutput(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "qbsde",
    version,
    about = "Monte Carlo solver suite for coupled quadratic-singular BSDE systems \
             and regime-switching optimal investment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Path count override.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Time step count override.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker thread count (0 = library default). Results do not depend on
    /// this; reductions are fixed-order.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the model assumptions and report violations.
    Validate,
    /// Simulate and persist a scenario batch.
    Simulate,
    /// Solve the value BSDE system and write the solution grids.
    Solve,
    /// Solve and run the a-priori estimate checkers (with grid refinement).
    VerifyBounds,
    /// Full investment pipeline: solve, extract the strategy, verify
    /// optimality statistically.
    Portfolio,
    /// Compare the solver against the deterministic-coefficient ODE oracle.
    OracleCompare,
    /// Convert run outputs into plot-ready tables.
    EmitPlotData,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::EmitPlotData = cli.command {
        return plots::emit_plot_data(&cli.out);
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required for this pipeline".into()))?;
    let mut config = config::ExperimentConfig::from_path(config_path)?;
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    if let Some(paths) = cli.paths {
        config.run.paths = paths;
    }
    if let Some(steps) = cli.steps {
        config.run.steps = steps;
    }

    let pipeline = match cli.command {
        Command::Validate => pipelines::Pipeline::Validate,
        Command::Simulate => pipelines::Pipeline::Simulate,
        Command::Solve => pipelines::Pipeline::Solve,
        Command::VerifyBounds => pipelines::Pipeline::VerifyBounds,
        Command::Portfolio => pipelines::Pipeline::Portfolio,
        Command::OracleCompare => pipelines::Pipeline::OracleCompare,
        Command::EmitPlotData => unreachable!(),
    };
    pipelines::run_experiment(&config, pipeline, &cli.out, cli.threads)
}
