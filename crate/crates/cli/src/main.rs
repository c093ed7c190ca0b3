//! Command-line pipeline: synth, preprocess, train, evaluate, predict,
//! gradcheck.
//!
//! Exit codes: 0 success, 2 data error, 3 numerical abort, 4 checkpoint
//! mismatch, 1 anything else. Set MEMEFUSE_LOG=quiet to silence progress
//! output on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memefuse_core::error::Error;

#[derive(Parser)]
#[command(name = "memefuse", version, about = "Multimodal multi-task meme classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode images and tokenize texts into a binary record file.
    Preprocess {
        /// Label file (TSV or CSV with header).
        #[arg(long)]
        labels: PathBuf,
        /// Directory holding the images named in the label file.
        #[arg(long)]
        images: PathBuf,
        /// Vocabulary file; built from the corpus when --build-vocab is given.
        #[arg(long)]
        vocab: PathBuf,
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long = "seq-len", default_value_t = 64)]
        seq_len: usize,
        /// Build a vocabulary of this size from the label-file texts and
        /// write it to --vocab before encoding.
        #[arg(long = "build-vocab")]
        build_vocab: Option<usize>,
        /// Override the compiled-in label-string mapping table.
        #[arg(long = "label-map")]
        label_map: Option<PathBuf>,
    },
    /// Two-phase training over a record file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// text, image or multimodal.
        #[arg(long)]
        variant: String,
        /// Output directory for checkpoints, the training log, and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Override config values: --set section.key=value (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        /// Resume from a last.ckpt written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Competition-format scores of a checkpoint over a record file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        records: PathBuf,
    },
    /// Write per-sample predicted class names.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every op and the fused model.
    Gradcheck {
        /// Validate this run configuration before the numerical suite.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeded cases per op.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Generate a synthetic corpus (images plus label file).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::Format(_)
        | Error::Decode { .. }
        | Error::Corrupt { .. }
        | Error::Input(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess {
            labels,
            images,
            vocab,
            out,
            resolution,
            seq_len,
            build_vocab,
            label_map,
        } => commands::preprocess(
            &labels,
            &images,
            &vocab,
            &out,
            resolution,
            seq_len,
            build_vocab,
            label_map.as_deref(),
        ),
        Command::Train {
            config,
            records,
            variant,
            out,
            set,
            resume,
        } => commands::train(&config, &records, &variant, &out, &set, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            records,
        } => commands::evaluate(&checkpoint, &records),
        Command::Predict {
            checkpoint,
            records,
            out,
        } => commands::predict(&checkpoint, &records, &out),
        Command::Gradcheck { config, cases } => commands::gradcheck(config.as_deref(), cases),
        Command::Synth {
            out,
            count,
            seed,
            resolution,
        } => commands::synth(&out, count, seed, resolution),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
