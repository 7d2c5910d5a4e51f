mod commands;
mod replay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "t4t", version, about = "Dual-head transparency-aware segmentation and feedback harness")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: file, `--model`, `--set`, threshold flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Model preset: tiny, small, medium or toy.
    #[arg(long, global = true)]
    model: Option<String>,

    #[arg(long = "theta_obstacle_m", alias = "theta-obstacle-m", global = true)]
    theta_obstacle_m: Option<f64>,

    #[arg(long = "theta_trans", alias = "theta-trans", global = true)]
    theta_trans: Option<f64>,

    #[arg(long = "theta_walkable", alias = "theta-walkable", global = true)]
    theta_walkable: Option<f64>,

    #[arg(long = "cycle_frames", alias = "cycle-frames", global = true)]
    cycle_frames: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a directory of synthetic scenes and write a checkpoint.
    Train {
        /// Scene directory (defaults to the dataset_dir key).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (defaults to the checkpoint key, then t4t.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch JSON lines (stdout when omitted).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment one image; writes palette masks and prints class counts.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for the mask images.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Ground-truth general labels for an mIoU report.
        #[arg(long)]
        gt_general: Option<PathBuf>,
        /// Ground-truth transparency labels for an mIoU report.
        #[arg(long)]
        gt_trans: Option<PathBuf>,
    },
    /// Stream numbered frames through the decision engine.
    Replay {
        #[arg(long)]
        frames: PathBuf,
        /// Model used to segment frames; without it label files are read.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Event log (stdout when omitted).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Parameter, FLOP and latency report.
    Metrics {
        /// Square input size.
        #[arg(long, default_value_t = 512)]
        input: usize,
        /// Timed forward passes (0 skips latency; otherwise at least 10).
        #[arg(long, default_value_t = 0)]
        latency_runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// JSON lines instead of a text table.
        #[arg(long)]
        jsonl: bool,
        /// Also print every layer.
        #[arg(long)]
        layers: bool,
    },
    /// Finite-difference gradient checks of every op and the toy model.
    Gradcheck {
        /// Entries sampled per parameter tensor of the toy model.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the eight per-stage decoder feature maps as PGM files.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image size (defaults to input_size).
        #[arg(long)]
        size: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::Train { data, out, log } => commands::train(c, data, out, log),
        Command::Infer { checkpoint, image, out, gt_general, gt_trans } => {
            commands::infer(c, &checkpoint, &image, &out, gt_general, gt_trans)
        }
        Command::Replay { frames, checkpoint, log } => replay::run(c, &frames, checkpoint, log),
        Command::Metrics { input, latency_runs, warmup, jsonl, layers } => {
            commands::metrics(c, input, latency_runs, warmup, jsonl, layers)
        }
        Command::Gradcheck { samples, seed } => commands::gradcheck(samples, seed),
        Command::ExportFeatures { checkpoint, image, out } => commands::export_features(c, &checkpoint, &image, &out),
        Command::Synth { out, count, seed, size } => commands::synth(c, &out, count, seed, size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
