//! Pipeline launcher. Exit codes: 0 success, 1 quality-gate failure,
//! 2 usage or I/O error. Verbosity via the TRAJSEG_LOG env var
//! (error|warn|info|debug|trace).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trajseg::cli::{cmd_eval, cmd_gen, cmd_infer, cmd_train, cmd_viz, CmdOutcome, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "trajseg",
    about = "Trajectory-based moving-object segmentation: synthetic data, training, inference, evaluation, visualization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scene parallelism (0 = automatic).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dynamic-probability threshold override.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset plus manifest.
    Gen,
    /// Train a segmentation model on a generated dataset.
    Train,
    /// Classify tracks, group them into objects, and densify masks.
    Infer,
    /// Score inference outputs against ground truth and apply quality gates.
    Eval,
    /// Render per-frame overlay images of masks and tracks.
    Viz,
}

fn run(cli: &Cli) -> trajseg::Result<CmdOutcome> {
    let cfg = RunConfig::resolve(
        cli.config.as_deref(),
        Overrides {
            seed: cli.seed,
            workers: cli.workers,
            threshold: cli.threshold,
        },
    )?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg).map(|()| CmdOutcome::Success),
        Command::Train => cmd_train(&cfg).map(|()| CmdOutcome::Success),
        Command::Infer => cmd_infer(&cfg).map(|()| CmdOutcome::Success),
        Command::Eval => cmd_eval(&cfg),
        Command::Viz => cmd_viz(&cfg).map(|()| CmdOutcome::Success),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRAJSEG_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(CmdOutcome::Success) => ExitCode::SUCCESS,
        Ok(CmdOutcome::QualityGateFailed) => {
            eprintln!("quality gate failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
