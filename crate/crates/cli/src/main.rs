//! `umct` command-line driver.

mod ablate;
mod eval;
mod plot;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, flags, files that fail validation (exit 1).
    Validation(anyhow::Error),
    /// Anything that went wrong while computing (exit 2).
    Runtime(anyhow::Error),
}

impl From<umct::Error> for CliError {
    fn from(e: umct::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.into())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(anyhow::anyhow!("{msg}"))
}

/// Input files must exist before any work starts.
pub fn require_file(path: &std::path::Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

#[derive(Parser)]
#[command(name = "umct", version, about = "Uncertainty-aware multi-view co-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset from a recipe file.
    SynthData {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the config's mode and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parent directory of run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Per-view (or one replicated) source checkpoints for UDA_NO_SOURCE.
        #[arg(long, num_args = 1..)]
        source_checkpoints: Vec<PathBuf>,
        /// Replace an existing run directory with the same config hash.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate checkpoints on held-out cases.
    Eval(eval::EvalArgs),
    /// Segment a single volume.
    Predict(eval::PredictArgs),
    /// Plot loss, inter-view agreement and label-ratio curves from run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic comparison experiments over several seeds.
    Ablate(ablate::AblateArgs),
}

fn init_threads() -> CliResult {
    if let Ok(v) = std::env::var("UMCT_THREADS") {
        let n: usize = v.parse().map_err(|_| invalid(format!("UMCT_THREADS={v:?} is not a positive integer")))?;
        if n == 0 {
            return Err(invalid("UMCT_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    init_threads()?;
    match cli.command {
        Command::SynthData { recipe, out } => synth::run(&recipe, &out),
        Command::Train { config, out, source_checkpoints, force } => train::run(&config, &out, source_checkpoints, force),
        Command::Eval(args) => eval::run_eval(&args),
        Command::Predict(args) => eval::run_predict(&args),
        Command::Plot { runs, out } => plot::run(&runs, &out),
        Command::Ablate(args) => ablate::run(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
