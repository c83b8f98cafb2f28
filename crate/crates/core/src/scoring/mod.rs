//! Desk-scale scoring: an n-gram next-token model, modality-restricted
//! perplexity, word error rate, attention-modality aggregation and a unit
//! histogram probe.

use thiserror::Error;

mod attention;
mod eval;
mod metrics;
mod ngram;
mod probe;

pub use attention::{attention_modality_profile, ROW_SUM_TOLERANCE};
pub use eval::{evaluate, EvalReport, KindReport, TEXT_KINDS, UNIT_KINDS};
pub use metrics::{normalize_words, ppl_aggregate, wer, wer_detail, WerDetail};
pub use ngram::{corpus_nll, NGramScorer};
pub use probe::{probe_label_accuracy, UnitProbe};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("{0}")]
    Domain(String),
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    OutOfVocab { id: u32, vocab_size: u32 },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("malformed scorer file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Template(#[from] crate::templates::TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
