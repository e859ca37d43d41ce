//! `quids`: synthetic data, negative augmentation, training, decoding,
//! evaluation and attention inspection.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use quids_core::decoding::DecodeMode;
use quids_core::evaluation::GroupBy;

#[derive(Debug, Parser)]
#[command(name = "quids", version, about = "Contrastive query-intent generation pipeline")]
pub struct Cli {
    /// TOML config with [synth], [split], [augment], [embedding], [vocab],
    /// [model], [train] and [generate] sections. A manifest.json from an
    /// earlier run is accepted too.
    #[arg(long, global = true, env = "QUIDS_CONFIG", visible_alias = "spec")]
    pub config: Option<PathBuf>,

    /// Threads for data-parallel sections (augmentation, decoding).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a topic-structured synthetic corpus and split it.
    Synth {
        /// Directory for train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Overrides [synth].seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank relevant documents and mine hard negatives.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; checkpoints and metrics go to the output directory.
    Train {
        #[arg(long = "train")]
        train_set: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides [train].epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides both [train].seed and [model].seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use original negatives and relevant order.
        #[arg(long)]
        no_idna: bool,
        /// Drop the representation-space loss.
        #[arg(long)]
        no_rsm: bool,
        /// Drop the disentangling loss.
        #[arg(long)]
        no_dsm: bool,
    },
    /// Decode intents for every sample of a dataset.
    Generate {
        /// A model.json, or a training run directory (its best checkpoint is used).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// auto, with_irrelevant or null_irrelevant.
        #[arg(long)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_length: Option<usize>,
        /// 0 disables the constraint.
        #[arg(long)]
        no_repeat_ngram: Option<usize>,
        /// JSON lines of {id, intent, score}.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions with ROUGE-1/2/L recall.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// none, intent_type or doc_length.
        #[arg(long, default_value = "none")]
        group_by: GroupBy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export cross-attention for one sample and render a heatmap.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long, default_value = "auto")]
        mode: DecodeMode,
        /// Generated-token index, or a token string (first occurrence).
        #[arg(long)]
        token: String,
        /// 0-based decoder layer; defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        /// Single head instead of the head mean.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference gradient check on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Report file; the manifest is written next to it.
        #[arg(long, default_value = "gradcheck.json")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.kind() == ErrorKind::InvalidSubcommand => {
            let _ = e.print();
            let names: Vec<String> = Cli::command()
                .get_subcommands()
                .map(|c| c.get_name().to_string())
                .collect();
            eprintln!("commands: {}", names.join(", "));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
