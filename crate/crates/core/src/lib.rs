//! Construction and verification of speech-text interleaved language-model
//! corpora.
//!
//! The pipeline runs from word alignments and discrete acoustic units to
//! interleaved pretraining sequences, dialog fine-tuning templates, packed
//! fixed-capacity training rows, and a count-based scorer that evaluates
//! modality-restricted perplexity.

pub mod alignment;
pub mod hash;
pub mod interleaver;
pub mod packer;
pub mod quantizer;
pub mod rng;
pub mod scoring;
pub mod span;
pub mod synthcorpus;
pub mod templates;
pub mod tokenizer;
pub mod vocab;

pub use alignment::{AlignedPair, WordAlignment};
pub use span::Span;
pub use vocab::{Modality, Special, Token, VocabLayout};
