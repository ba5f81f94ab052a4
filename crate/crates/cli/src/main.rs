mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsbs_core::data::Split;

/// Handwritten-style math expression recognizer: synthesis, training,
/// evaluation, recognition and attention maps.
#[derive(Parser)]
#[command(name = "wsbs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory; writes best.ckpt, last.ckpt and metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Warm-start from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Drop the coverage term from attention scoring.
        #[arg(long)]
        no_coverage: bool,
    },
    /// Score greedy predictions on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model configuration; defaults to run.toml beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the recognized tokens of one PGM image.
    Recognize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
    },
    /// Recognize one image and write per-step attention heatmaps.
    Attend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth { config, out, n, seed } => commands::synth(config.as_deref(), out, n, seed),
        Command::Train {
            config,
            data_dir,
            out,
            resume,
            no_coverage,
        } => commands::train(config.as_deref(), data_dir, out, resume.as_deref(), no_coverage),
        Command::Eval {
            checkpoint,
            config,
            data_dir,
            split,
            out,
        } => commands::eval(&checkpoint, config.as_deref(), &data_dir, split, out),
        Command::Recognize { checkpoint, config, image } => {
            commands::recognize(&checkpoint, config.as_deref(), &image)
        }
        Command::Attend {
            checkpoint,
            config,
            image,
            out_dir,
        } => commands::attend(&checkpoint, config.as_deref(), &image, &out_dir),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
