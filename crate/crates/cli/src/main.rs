//! `jssl`: data synthesis, masks and partitions, training, evaluation,
//! reporting and theory simulations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Failure of a subcommand, mapped onto the exit code scheme
/// 2 (usage/config), 3 (I/O), 4 (numerical).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Core(jssl_core::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        use jssl_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Shape { .. } | E::InvalidArgument(_) => 2,
                E::Io { .. } | E::Format { .. } => 3,
                E::NonFinite(_) | E::Diverged { .. } => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<jssl_core::Error> for CliError {
    fn from(e: jssl_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "jssl",
    version,
    about = "Joint supervised and self-supervised MRI reconstruction toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Base random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-coil dataset.
    Synth(commands::SynthArgs),
    /// Generate an undersampling mask.
    Mask(commands::MaskArgs),
    /// Split a mask into disjoint loss and input subsets.
    Partition(commands::PartitionArgs),
    /// Train a reconstruction model under one of the six setups.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint (or zero-filling) on the test split.
    Eval(commands::EvalArgs),
    /// Aggregate evaluation directories into tables, tests and image grids.
    Report(commands::ReportArgs),
    /// Monte-Carlo checks of the bias-variance propositions.
    Theory(commands::TheoryArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.common.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let c = &cli.common;
    match cli.command {
        Command::Synth(a) => commands::synth(c, a),
        Command::Mask(a) => commands::mask(c, a),
        Command::Partition(a) => commands::partition(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Eval(a) => commands::eval(c, a),
        Command::Report(a) => commands::report(c, a),
        Command::Theory(a) => commands::theory(c, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
