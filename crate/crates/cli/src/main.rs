//! `stkit`: command-line driver for the corpus pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 checksum
//! error. Failures print one JSON record to stderr.

mod commands;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stkit::packer::PackError;

use options::Options;

#[derive(Debug, Parser)]
#[command(name = "stkit", version, about = "Speech-text interleaved corpus pipeline")]
struct Cli {
    /// Flat JSON config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic aligned corpus and dialog set.
    Synth,
    /// Fit a k-means codebook and/or map features to units.
    Quantize,
    /// Convert word alignments to unit spans and validate them.
    Align,
    /// Build a vocabulary layout and lexicon from word alignments.
    Vocab,
    /// Render aligned pairs as interleaved pretraining sequences.
    Interleave,
    /// Build fine-tuning samples from dialogs.
    Template,
    /// Pack training samples into fixed-capacity bins.
    Pack,
    /// Train an n-gram scorer.
    TrainScorer,
    /// Per-kind perplexity of a scorer on held-out pairs.
    EvalPpl,
    /// Word error rate between transcript files.
    Wer,
    /// Prosody-class probe accuracy from unit sequences.
    Probe,
    /// Attention mass per source modality.
    AttnProfile,
    /// Summary statistics or a text dump of a packed corpus.
    Stats,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Quantize => "quantize",
            Command::Align => "align",
            Command::Vocab => "vocab",
            Command::Interleave => "interleave",
            Command::Template => "template",
            Command::Pack => "pack",
            Command::TrainScorer => "train-scorer",
            Command::EvalPpl => "eval-ppl",
            Command::Wer => "wer",
            Command::Probe => "probe",
            Command::AttnProfile => "attn-profile",
            Command::Stats => "stats",
        }
    }
}

/// Invalid or missing configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else if err.chain().any(|e| matches!(e.downcast_ref::<PackError>(), Some(PackError::Checksum { .. }))) {
        4
    } else {
        3
    }
}

fn report(command: &str, code: u8, message: String) -> ExitCode {
    let kind = match code {
        2 => "config",
        4 => "checksum",
        _ => "data",
    };
    let record = serde_json::json!({ "error": kind, "command": command, "exit_code": code, "message": message });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut opts = cli.options;
    if let Some(path) = &cli.config {
        opts = opts.merged_over(Options::from_config_file(path)?);
    }
    if let Some(n) = opts.workers {
        if n == 0 {
            return Err(ConfigError("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    commands::run(cli.command, &opts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("", 2, e.to_string().trim_end().to_string()),
    };
    let command = cli.command;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(command.name(), exit_code(&e), format!("{e:#}")),
    }
}
