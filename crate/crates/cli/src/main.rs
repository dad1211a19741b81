//! `bonet`: generate synthetic scenes, train, evaluate, and inspect the
//! gradient and association machinery.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 internal
//! failure (e.g. a gradient check beyond tolerance or a non-finite gradient).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the log filter, e.g. `BONET_LOG=debug`.
pub const LOG_ENV: &str = "BONET_LOG";

#[derive(Debug, Parser)]
#[command(name = "bonet", version, about = "Box-regression instance segmentation for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (scene files plus manifest).
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the cost matrix and optimal assignment for given boxes.
    Assign(AssignArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// JSON file with `gen`, `train_scenes` and `test_scenes` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradMode {
    Zero,
    StraightThrough,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// JSON file with `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint, loss history and run manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    grad_mode: Option<GradMode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON file with an `eval` section and optionally a `model` section,
    /// which must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    mask_thresh: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// JSON model configuration; defaults to the miniature check model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random instances per loss component.
    #[arg(long)]
    instances: Option<usize>,
    /// Write the result table as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: perturb one analytic gradient entry so the check must fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Debug, Args)]
struct AssignArgs {
    /// Scene file.
    #[arg(long)]
    scene: PathBuf,
    /// JSON list of predicted boxes, each `{"vmin": [..], "vmax": [..]}`.
    #[arg(long)]
    boxes: PathBuf,
    /// JSON loss configuration (clamp and cost weights).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Assign(a) => commands::assign(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for broken internal invariants, 1 for everything caused by inputs.
fn exit_code(e: &anyhow::Error) -> u8 {
    let internal = e
        .chain()
        .filter_map(|c| c.downcast_ref::<bonet::Error>())
        .any(|b| !b.is_user_error());
    if internal {
        2
    } else {
        1
    }
}
