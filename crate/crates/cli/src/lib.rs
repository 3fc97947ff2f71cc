//! Command-line experiments: teacher training, masked distillation, cost
//! tables, pipeline timelines, mask visualizations and keep sweeps.
//!
//! Every command is a pure function of its config, data files and seed.
//! Usage and configuration problems exit with status 2, failures while
//! running exit with status 1.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config, missing input files.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] maskedkd::Error),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) | CliError::Output { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "maskedkd", version, about = "Masked knowledge distillation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Keep outputs free of wall-clock data so reruns are byte-identical.
    #[arg(
        long,
        global = true,
        value_name = "BOOL",
        default_value_t = true,
        action = ArgAction::Set,
        num_args = 0..=1,
        default_missing_value = "true"
    )]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training of the teacher; writes teacher.ckpt and
    /// teacher_report.csv.
    TrainTeacher,
    /// Distills the student from the teacher checkpoint; writes
    /// student.ckpt, report.csv and summary.json.
    Distill(DistillArgs),
    /// Prints the FLOPs breakdown of a model, full and masked.
    Flops(FlopsArgs),
    /// Simulates one distillation step on two devices.
    SimulatePipeline(PipelineArgs),
    /// Writes PPM images of one validation example and its mask.
    Visualize(VisualizeArgs),
    /// Accuracy of a checkpoint across teacher keep fractions.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    /// Overrides `masking.keep`: `full`, a count, or a fraction like `0.5`.
    #[arg(long)]
    pub keep: Option<String>,
    /// Overrides `masking.policy`: top-k, min-k, random[:SEED], token-token,
    /// external:PATH.
    #[arg(long)]
    pub policy: Option<String>,
    /// Overrides `distill.lambda`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Overrides `run.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// Named shape: deit-ti, deit-s, deit-b, deit-s-384, deit-b-384.
    #[arg(long, conflicts_with_all = ["depth", "dim", "patches", "all"])]
    pub preset: Option<String>,
    /// Encoder depth L.
    #[arg(long, requires_all = ["dim", "patches"])]
    pub depth: Option<u64>,
    /// Embedding width d.
    #[arg(long)]
    pub dim: Option<u64>,
    /// Patch count N, without the class token.
    #[arg(long)]
    pub patches: Option<u64>,
    /// Patches kept for the masked column: a count or a fraction like
    /// `0.5`. Defaults to half.
    #[arg(long, default_value = "0.5")]
    pub keep: String,
    /// Every preset, one row each.
    #[arg(long)]
    pub all: bool,
    /// Comma-separated rows of raw FLOP counts instead of a table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Scenario file (JSON) with either `timing` or `derive`.
    #[arg(long, value_name = "PATH")]
    pub scenario: PathBuf,
    /// Also draw each timeline, one character per `QUANTUM` time units.
    #[arg(long, value_name = "QUANTUM", num_args = 0..=1, default_missing_value = "1")]
    pub gantt: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    /// Validation example to draw.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Model whose attention picks the kept patches; defaults to
    /// student.ckpt in the output directory.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model to evaluate.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Model that ranks patches; defaults to the evaluated model.
    #[arg(long, value_name = "PATH")]
    pub scorer: Option<PathBuf>,
    /// Keep fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5,0.25")]
    pub fractions: Vec<f64>,
    /// Overrides `masking.policy`.
    #[arg(long)]
    pub policy: Option<String>,
}

/// Runs one parsed command line, writing primary output to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainTeacher => commands::train_teacher(&cli.global, out),
        Command::Distill(a) => commands::distill(&cli.global, a, out),
        Command::Flops(a) => commands::flops(a, out),
        Command::SimulatePipeline(a) => commands::simulate_pipeline(&cli.global, a, out),
        Command::Visualize(a) => commands::visualize(&cli.global, a, out),
        Command::Eval(a) => commands::eval(&cli.global, a, out),
    }
}
