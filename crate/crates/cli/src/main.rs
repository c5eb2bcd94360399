//! `tete`: prepare corpora, train, summarize, evaluate, classify and
//! sample conversations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tete_core::model::Architecture;
use tete_core::Error;

#[derive(Debug, Parser)]
#[command(name = "tete", version, about = "Unsupervised two-speaker dialogue summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Recurrent,
    Selfattentive,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Recurrent => Architecture::Recurrent,
            Arch::Selfattentive => Architecture::SelfAttentive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClassifyMode {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest a corpus and write the prepared directory.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// jsonl, multiwoz-json or taskmaster-json.
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = tete_core::corpus::DEFAULT_MIN_FREQ)]
        min_freq: usize,
        #[arg(long, default_value_t = tete_core::corpus::DEFAULT_MAX_SIZE)]
        max_vocab: usize,
        /// One entity name per line, added to the factual lexicon rules.
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        corpus_dir: PathBuf,
        /// JSON or `key = value` file; unspecified keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "recurrent")]
        arch: Arch,
        /// Output directory for `model.ckpt` and `report.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write customer and agent summaries for a split as JSONL.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = tete_core::summarizer::DEFAULT_SUMMARY_MAX_LEN)]
        max_len: usize,
        /// Disable the factual copy step.
        #[arg(long)]
        no_copy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROUGE against references and/or reconstruction perplexity.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "references")]
        summaries: Option<PathBuf>,
        #[arg(long, requires = "summaries")]
        references: Option<PathBuf>,
        #[arg(long, requires_all = ["checkpoint", "corpus_dir"])]
        ppl: bool,
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Domain classification AUC from summary representations.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, value_enum, default_value = "unsupervised")]
        mode: ClassifyMode,
        /// Training settings for supervised mode (defaults to those stored
        /// in the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Force per-label sigmoid scoring; by default it is used when any
        /// dialogue has several domains.
        #[arg(long)]
        multi_label: bool,
        #[arg(long, default_value_t = tete_core::summarizer::DEFAULT_SUMMARY_MAX_LEN)]
        max_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to store the jointly trained checkpoint (supervised mode).
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Sample single-turn conversations from the priors.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a templated corpus with factual tokens and domain labels.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_dialogues: usize,
        #[arg(long, default_value_t = 2)]
        n_domains: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// 0 success, 1 usage, 2 data, 3 runtime.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownFormat(_) | Error::InvalidArgument(_) => 1,
        Error::Io { .. }
        | Error::MalformedRecord { .. }
        | Error::UnknownSpeaker { .. }
        | Error::Empty(_)
        | Error::Checkpoint(_)
        | Error::UnseenLabel(_)
        | Error::Missing(_)
        | Error::Json(_)
        | Error::TokenOutOfRange { .. } => 2,
        Error::NonFiniteLoss { .. } | Error::DimensionMismatch { .. } => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TETE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
