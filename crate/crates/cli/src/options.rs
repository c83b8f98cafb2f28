//! Pipeline options: command-line flags merged over a flat JSON config file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Every option of every subcommand. A config file may set any of them
/// under the same name (dashes or underscores); flags win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Corpus seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Vocabulary directory holding layout.json and lexicon.json.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Packing capacity in tokens.
    #[arg(long, global = true)]
    pub capacity: Option<usize>,
    /// Probability of inserting a sub block after each main block.
    #[arg(long, global = true)]
    pub insert_prob: Option<f64>,
    /// Pretraining setup: unified, 1, 2 or 3.
    #[arg(long, global = true)]
    pub setup: Option<String>,
    /// Evaluation kinds: "all" or a comma-separated list.
    #[arg(long, global = true)]
    pub kinds: Option<String>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Word alignments: a JSON Lines file or a directory of TextGrids.
    #[arg(long, global = true)]
    pub words: Option<PathBuf>,
    /// Unit sequences (JSON Lines).
    #[arg(long, global = true)]
    pub units: Option<PathBuf>,
    /// Feature matrix binary.
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    /// Per-utterance metadata (JSON Lines with id, n_frames, label).
    #[arg(long, global = true)]
    pub meta: Option<PathBuf>,
    /// Codebook binary; written when --k is given, read otherwise.
    #[arg(long, global = true)]
    pub codebook: Option<PathBuf>,
    /// Number of k-means clusters to fit.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Lloyd iteration cap.
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    /// Dialog samples (JSON Lines).
    #[arg(long, global = true)]
    pub dialogs: Option<PathBuf>,
    /// Fine-tuning template: sdm, s1s2 or text.
    #[arg(long, global = true)]
    pub template: Option<String>,
    /// Training samples with masks (JSON Lines).
    #[arg(long, global = true)]
    pub training: Option<PathBuf>,
    /// Interleaved sequences (JSON Lines).
    #[arg(long, global = true)]
    pub sequences: Option<PathBuf>,
    /// Packed corpus binary.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Serialized n-gram scorer.
    #[arg(long, global = true)]
    pub scorer: Option<PathBuf>,
    /// N-gram order.
    #[arg(long, global = true)]
    pub order: Option<usize>,
    /// Additive smoothing constant.
    #[arg(long, global = true)]
    pub add_k: Option<f64>,
    /// Also write the evaluation report as CSV here.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
    /// Reference transcripts, one utterance per line.
    #[arg(long, global = true)]
    pub reference: Option<PathBuf>,
    /// Hypothesis transcripts, one utterance per line.
    #[arg(long, global = true)]
    pub hypothesis: Option<PathBuf>,
    /// Attention tensor (JSON with shape, weights and source tags).
    #[arg(long, global = true)]
    pub attention: Option<PathBuf>,
    /// Text id range size of a new layout.
    #[arg(long, global = true)]
    pub text_size: Option<u32>,
    /// Unit codebook size of a new layout.
    #[arg(long, global = true)]
    pub unit_count: Option<u32>,
    /// Number of synthetic utterances.
    #[arg(long, global = true)]
    pub n_samples: Option<usize>,
    /// Length of the per-class prosody offset.
    #[arg(long, global = true)]
    pub prosody_offset: Option<f64>,
    /// Feature noise standard deviation.
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// Leading fraction of records used to fit the probe.
    #[arg(long, global = true)]
    pub train_fraction: Option<f64>,
    /// Collapse runs of identical consecutive units after quantization.
    #[arg(long, global = true)]
    #[serde(default)]
    pub dedup: bool,
    /// Write the full text dump instead of summary statistics.
    #[arg(long, global = true)]
    #[serde(default)]
    pub dump: bool,
}

macro_rules! fill {
    ($dst:ident, $src:ident, $($f:ident),+ $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f; } )+
    };
}

impl Options {
    /// Reads a flat JSON object. Keys may use dashes or underscores.
    pub fn from_config_file(path: &Path) -> Result<Options, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?;
        let serde_json::Value::Object(map) = value else {
            return Err(ConfigError(format!("config {} must be a JSON object", path.display())));
        };
        let map: serde_json::Map<String, serde_json::Value> =
            map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
        serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))
    }

    /// Fills every option not given on the command line from `file`.
    pub fn merged_over(mut self, file: Options) -> Options {
        let s = &mut self;
        fill!(
            s,
            file,
            seed,
            workers,
            vocab,
            capacity,
            insert_prob,
            setup,
            kinds,
            out,
            words,
            units,
            features,
            meta,
            codebook,
            k,
            max_iters,
            dialogs,
            template,
            training,
            sequences,
            corpus,
            scorer,
            order,
            add_k,
            csv,
            reference,
            hypothesis,
            attention,
            text_size,
            unit_count,
            n_samples,
            prosody_offset,
            noise,
            train_fraction,
        );
        s.dump |= file.dump;
        s.dedup |= file.dedup;
        self
    }
}

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ADD_K: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

impl Options {
    /// Fills the options that have defaults.
    pub fn with_defaults(mut self) -> Options {
        self.seed.get_or_insert(DEFAULT_SEED);
        self.capacity.get_or_insert(stkit::packer::DEFAULT_CAPACITY);
        self.insert_prob.get_or_insert(stkit::interleaver::DEFAULT_INSERT_PROB);
        self.setup.get_or_insert_with(|| "unified".into());
        self.kinds.get_or_insert_with(|| "all".into());
        self.template.get_or_insert_with(|| "sdm".into());
        self.order.get_or_insert(DEFAULT_ORDER);
        self.add_k.get_or_insert(DEFAULT_ADD_K);
        self.max_iters.get_or_insert(DEFAULT_MAX_ITERS);
        self.train_fraction.get_or_insert(DEFAULT_TRAIN_FRACTION);
        self
    }
}

/// The value of a required option.
pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, ConfigError> {
    value.as_ref().ok_or_else(|| ConfigError(format!("--{flag} is required")))
}
