//! `pmn`: data generation, progressive training, evaluation, traces,
//! ablation grids and gradient checks from one JSON config.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

mod commands;

use clap::{Parser, Subcommand};
use pmn::tasks::TaskKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "pmn",
    version,
    about = "Progressive module networks on a synthetic scene suite"
)]
pub struct Cli {
    /// JSON config file; omitted means every default.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted override applied on top of the config, e.g. model.hidden=64.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Run data-parallel loops on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub verb: Verb,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Draw train and test questions for a task and write them as JSON lines.
    GenData {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
    },
    /// Train a task module. Missing lower modules are trained first unless
    /// `--from` supplies their checkpoints.
    Train {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Directory holding `<module>.ckpt` files of the lower modules.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
    /// Score a trained module on the test split.
    Eval {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Directory holding `<module>.ckpt` files for the task and its children.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
    },
    /// Export the execution trace of one test question.
    Trace {
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long)]
        question_id: usize,
    },
    /// Run a named ablation grid over several seeds.
    Ablate {
        #[arg(long, default_value = "counting-table2")]
        preset: String,
        /// Comma-separated seeds replacing the preset's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Take widths, budgets and seeds from the config instead of the
        /// preset's desk sizes.
        #[arg(long)]
        from_config: bool,
    },
    /// Base versus compositional accuracy over training fractions.
    Lowdata {
        #[arg(long, default_value = "qa-lowdata")]
        preset: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated fractions replacing the preset's.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Take widths, budgets, seeds and fractions from the config.
        #[arg(long)]
        from_config: bool,
    },
    /// Finite-difference check of every block and of a composed task module
    /// at small widths. Fails (exit 2) above the tolerance.
    GradCheck {
        #[arg(long, value_parser = parse_task, default_value = "qa")]
        task: TaskKind,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        /// Number of initialization seeds.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Coordinates probed per parameter entry.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::GenData { .. } => "gen-data",
            Verb::Train { .. } => "train",
            Verb::Eval { .. } => "eval",
            Verb::Trace { .. } => "trace",
            Verb::Ablate { .. } => "ablate",
            Verb::Lowdata { .. } => "lowdata",
            Verb::GradCheck { .. } => "grad-check",
        }
    }
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<pmn::PmnError> for Failure {
    fn from(e: pmn::PmnError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
