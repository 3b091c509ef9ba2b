//! `gebc`: generate synthetic data, train, predict and score boundary captions.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (non-finite loss or gradient).
//!
//! `GEBC_NUM_WORKERS` caps the number of worker threads.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gebc::datamodel::CaptionKind;
use gebc::GebcError;

#[derive(Parser, Debug)]
#[command(name = "gebc", version, about = "Generic event boundary captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (annotations.json plus features/).
    Generate {
        /// TOML file describing the synthetic dataset.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Override the seed from the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one caption model (one per caption kind).
    Train {
        /// Dataset directory containing annotations.json and features/.
        #[arg(long)]
        data: PathBuf,
        /// Caption kind to train: subject, before or after.
        #[arg(long)]
        kind: CaptionKind,
        /// TOML file with optional [model] and [train] tables. Defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Override both the model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decode a caption for every boundary of a dataset.
    Predict {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory containing annotations.json and features/.
        #[arg(long)]
        data: PathBuf,
        /// Caption kind; must match the checkpoint.
        #[arg(long)]
        kind: CaptionKind,
        /// Output predictions file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions with CIDEr-D and ROUGE-L.
    Evaluate {
        /// Predictions file (JSON).
        #[arg(long)]
        pred: PathBuf,
        /// Annotations file holding the references.
        #[arg(long)]
        ann: PathBuf,
        /// Only score this kind. By default every kind must be present.
        #[arg(long)]
        kind: Option<CaptionKind>,
        /// Report scores multiplied by 100.
        #[arg(long)]
        percent: bool,
        /// Where to write the JSON report. Defaults to <pred stem>.scores.json next to the predictions.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn exit_code(err: &GebcError) -> u8 {
    match err {
        GebcError::Config { .. } => 1,
        GebcError::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> gebc::Result<()> {
    match cli.command {
        Command::Generate { spec, out, force, seed } => commands::cmd_generate(&spec, &out, force, seed),
        Command::Train { data, kind, config, out, seed } => {
            commands::cmd_train(&data, kind, config.as_deref(), &out, seed)
        }
        Command::Predict { ckpt, data, kind, out } => commands::cmd_predict(&ckpt, &data, kind, &out),
        Command::Evaluate { pred, ann, kind, percent, report } => {
            commands::cmd_evaluate(&pred, &ann, kind, percent, report.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
