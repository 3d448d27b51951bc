//! `roifusion` — refine 3D detection proposals with LiDAR-camera fusion on
//! synthetic scenes: generate data, train, refine, evaluate, gradient-check.
//!
//! Every command is deterministic under `--seed` and composes with the
//! others through files only; each run writes a manifest next to its output.

mod commands;
mod gradcheck;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roifusion_core::config::ConfigError;
use roifusion_core::model::ModelError;
use roifusion_core::scene::{GenError, SceneIoError};
use roifusion_core::train::TrainError;

/// Exit codes: 0 success, 2 configuration error, 3 verification failure,
/// 4 runtime divergence, 1 anything else.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Verification(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Verification(m)
            | CliError::Divergence(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::CheckpointMismatch { .. } | ModelError::BadConfig(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(c) => CliError::Config(c.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SceneIoError> for CliError {
    fn from(e: SceneIoError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "roifusion", version, about = "Two-stage 3D detection refinement with LiDAR-camera fusion at desk scale")]
struct Cli {
    /// Seed override (wins over the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Primary output path of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Gen,
    /// Train the refinement network on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Drop the image branch and cross-attention (LiDAR-only ablation).
        #[arg(long)]
        lidar_only: bool,
        /// Epoch override (wins over the config file).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Refine every proposal of a dataset with a trained checkpoint.
    Refine {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Uniform rect jitter in feature-map cells (calibration noise).
        #[arg(long, default_value_t = 0.0)]
        calib_jitter: f64,
        /// The checkpoint was trained LiDAR-only.
        #[arg(long)]
        lidar_only: bool,
    },
    /// Evaluate detections and/or raw proposals against ground truth.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Detections file produced by `refine`.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Also evaluate the dataset's raw proposals (before/after table).
        #[arg(long)]
        proposals: bool,
        /// Write PR-curve and AP-by-distance SVGs into this directory.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// IoU kind for matching: 3d or bev.
        #[arg(long, default_value = "3d")]
        iou: String,
    },
    /// Finite-difference verification of every learnable block.
    Gradcheck {
        /// Check only blocks whose name contains this substring.
        #[arg(long)]
        block: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("ROIFUSION_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let result = match cli.command {
        Command::Gen => commands::gen(cli.config.as_deref(), cli.seed, cli.out.as_deref()),
        Command::Train {
            ref dataset,
            lidar_only,
            epochs,
        } => commands::train(
            dataset,
            cli.config.as_deref(),
            cli.seed,
            epochs,
            lidar_only,
            cli.out.as_deref(),
        ),
        Command::Refine {
            ref dataset,
            ref checkpoint,
            calib_jitter,
            lidar_only,
        } => commands::refine(
            dataset,
            checkpoint,
            cli.config.as_deref(),
            cli.seed,
            calib_jitter,
            lidar_only,
            cli.out.as_deref(),
        ),
        Command::Eval {
            ref dataset,
            ref detections,
            proposals,
            ref plot,
            ref iou,
        } => commands::eval(
            dataset,
            detections.as_deref(),
            proposals,
            cli.config.as_deref(),
            plot.as_deref(),
            iou,
            cli.out.as_deref(),
        ),
        Command::Gradcheck { ref block } => {
            gradcheck::run(cli.config.as_deref(), cli.seed, block.as_deref(), cli.out.as_deref())
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
