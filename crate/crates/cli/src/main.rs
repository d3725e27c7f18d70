//! `tpv` — generate synthetic scenes, fit the tri-plane encoder, score it,
//! and export occupancy grids.
//!
//! Exit codes: 0 success, 2 bad configuration or flags, 3 unusable data or
//! output location, 4 numeric failure (non-finite loss).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{cmd_eval, cmd_export, cmd_gen, cmd_train, EvalTask};
use config::resolve;
use tpv_core::train::Representation;

/// A failure with the exit-code class it belongs to.
#[derive(Debug)]
pub struct CliError {
    kind: ErrorKind,
    message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError { kind: ErrorKind::Config, message }
    }

    pub fn data(message: String) -> Self {
        CliError { kind: ErrorKind::Data, message }
    }

    pub fn numeric(message: String) -> Self {
        CliError { kind: ErrorKind::Numeric, message }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Config => "config error",
            ErrorKind::Data => "data error",
            ErrorKind::Numeric => "numeric error",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

#[derive(Parser)]
#[command(name = "tpv", version, about = "Tri-plane semantic occupancy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    /// Mean IoU at the labeled surface points.
    Points,
    /// Occupancy IoU and semantic mean IoU of the dense grid.
    Occupancy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReprArg {
    /// Read all three planes.
    Full,
    /// Read only the overhead plane (height-blind baseline).
    TopOnly,
}

impl From<ReprArg> for Representation {
    fn from(arg: ReprArg) -> Self {
        match arg {
            ReprArg::Full => Representation::Full,
            ReprArg::TopOnly => Representation::TopOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene directory: description, rig, renders, points, grid.
    Gen {
        /// Output directory; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
        /// Run file with `key value` lines; omitted keys use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config difficulty (empty | scatter | stacked).
        #[arg(long)]
        difficulty: Option<String>,
    },
    /// Fit a model to a generated directory and write a checkpoint.
    Train {
        /// Directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to create; refuses to overwrite.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a generated directory.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric family to report.
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Plane subset used for prediction.
        #[arg(long, value_enum, default_value = "full")]
        repr: ReprArg,
    },
    /// Decode a checkpoint into an occupancy grid, optionally rescaled.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Uniform plane-resolution multiplier applied before decoding.
        #[arg(long, default_value_t = 1.0)]
        factor: f64,
        /// Output directory; must be empty or absent.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { out, config, seed, difficulty } => {
            let run = resolve(config.as_deref(), seed, difficulty.as_deref())?;
            cmd_gen(&run, &out)
        }
        Command::Train { data, out, config, seed } => {
            let run = resolve(config.as_deref(), seed, None)?;
            cmd_train(&run, &data, &out)
        }
        Command::Eval { ckpt, data, task, repr } => {
            let task = match task {
                TaskArg::Points => EvalTask::Points,
                TaskArg::Occupancy => EvalTask::Occupancy,
            };
            cmd_eval(&ckpt, &data, task, repr.into())
        }
        Command::Export { ckpt, data, factor, out } => cmd_export(&ckpt, &data, factor, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("{error}");
            ExitCode::from(error.code())
        }
    }
}
