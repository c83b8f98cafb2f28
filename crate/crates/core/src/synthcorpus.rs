//! Synthetic aligned speech/text corpora with known ground truth.
//!
//! A seeded "world" fixes everything shared across utterances:
//!
//! - a codebook of `codebook_size` centroids in `feature_dim` dimensions;
//! - a lexicon of pronounceable pseudo-words, each owning
//!   `states_per_word` distinct centroids (its pronunciation states);
//! - a first-order Markov chain over words with `successors` next words each;
//! - one offset vector of length `prosody_offset` per prosody class.
//!
//! An utterance draws a prosody class, a word sequence from the chain and a
//! whole-frame duration per word. A word's frames are split evenly across its
//! states; each frame is `centroid(state) + offset(class) + noise * N(0, 1)`,
//! and its true unit is the centroid nearest to the noiseless frame.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{AlignedPair, AlignmentError, UnitsRecord, WordAlignment, WordsRecord, FRAME_RATE_HZ};
use crate::quantizer::{Codebook, FeatureMatrix, QuantizerError};
use crate::rng::indexed_rng;
use crate::templates::{write_dialogs_jsonl, DialogSample, TemplateError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("unknown response rule {0:?} (expected \"echo\" or \"reverse\")")]
    UnknownRule(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub lexicon_size: usize,
    pub successors: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Per-word duration range in seconds.
    pub min_word_sec: f64,
    pub max_word_sec: f64,
    pub feature_dim: usize,
    pub codebook_size: usize,
    pub states_per_word: usize,
    pub prosody_classes: usize,
    pub prosody_offset: f64,
    pub noise: f64,
    pub response_rule: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            lexicon_size: 40,
            successors: 3,
            min_words: 25,
            max_words: 75,
            min_word_sec: 0.1,
            max_word_sec: 0.5,
            feature_dim: 16,
            codebook_size: 128,
            states_per_word: 2,
            prosody_classes: 6,
            prosody_offset: 0.0,
            noise: 0.1,
            response_rule: "reverse".into(),
            seed: 0,
        }
    }
}

/// How a dialog response is derived from the input words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseRule {
    /// Same words.
    Echo,
    /// Words in reverse order.
    Reverse,
}

impl ResponseRule {
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        match s {
            "echo" => Ok(Self::Echo),
            "reverse" => Ok(Self::Reverse),
            _ => Err(SynthError::UnknownRule(s.into())),
        }
    }

    pub fn apply(self, words: &[String]) -> Vec<String> {
        match self {
            Self::Echo => words.to_vec(),
            Self::Reverse => words.iter().rev().cloned().collect(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        let counts = [
            self.n_samples,
            self.lexicon_size,
            self.successors,
            self.min_words,
            self.feature_dim,
            self.codebook_size,
            self.states_per_word,
            self.prosody_classes,
        ];
        if counts.contains(&0) {
            return bad("all counts must be positive");
        }
        if self.min_words > self.max_words {
            return bad("min_words exceeds max_words");
        }
        if !(self.min_word_sec > 0.0 && self.min_word_sec <= self.max_word_sec && self.max_word_sec <= 10.0) {
            return bad("word duration range must lie within (0, 10]");
        }
        if !(self.prosody_offset >= 0.0 && self.prosody_offset.is_finite()) {
            return bad("prosody_offset must be finite and >= 0");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        if self.lexicon_size * self.states_per_word > self.codebook_size {
            return bad("codebook too small for lexicon_size * states_per_word distinct states");
        }
        if self.successors > self.lexicon_size {
            return bad("successors exceeds lexicon_size");
        }
        if self.lexicon_size > WORD_SPACE {
            return bad("lexicon_size too large for two-syllable pseudo-words");
        }
        ResponseRule::parse(&self.response_rule)?;
        Ok(())
    }
}

/// The shared ground truth behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub codebook: Codebook,
    pub words: Vec<String>,
    /// Centroid index of each pronunciation state, per word.
    pub word_states: Vec<Vec<u32>>,
    pub successors: Vec<Vec<usize>>,
    pub class_offsets: Vec<Vec<f64>>,
    /// True unit of a noiseless frame, indexed `[centroid][class]`.
    unit_of: Vec<Vec<u32>>,
}

const ONSETS: [&str; 15] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const WORD_SPACE: usize = (ONSETS.len() * VOWELS.len()).pow(2);

fn pseudo_word(i: usize) -> String {
    let syllable = |j: usize| format!("{}{}", ONSETS[j / VOWELS.len() % ONSETS.len()], VOWELS[j % VOWELS.len()]);
    let per = ONSETS.len() * VOWELS.len();
    format!("{}{}", syllable(i / per), syllable(i % per))
}

fn noiseless_frame(codebook: &Codebook, centroid: usize, offset: &[f64]) -> Vec<f32> {
    codebook.centroid(centroid).iter().zip(offset).map(|(c, o)| (c + o) as f32).collect()
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let mut rng = indexed_rng(cfg.seed, "world", 0);
        let (k, dim) = (cfg.codebook_size, cfg.feature_dim);
        // f32-representable so a codebook reloaded from disk is identical
        let centroids: Vec<f64> = (0..k * dim)
            .map(|_| f64::from(<StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng)))
            .collect();
        let codebook = Codebook::new(k, dim, centroids, cfg.seed)?;

        let mut shuffled: Vec<u32> = (0..k as u32).collect();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        let words: Vec<String> = (0..cfg.lexicon_size).map(|i| pseudo_word((i * 7 + 3) % WORD_SPACE)).collect();
        let word_states = (0..cfg.lexicon_size)
            .map(|w| shuffled[w * cfg.states_per_word..(w + 1) * cfg.states_per_word].to_vec())
            .collect();
        let all: Vec<usize> = (0..cfg.lexicon_size).collect();
        let successors =
            (0..cfg.lexicon_size).map(|_| all.choose_multiple(&mut rng, cfg.successors).copied().collect()).collect();
        let class_offsets: Vec<Vec<f64>> = (0..cfg.prosody_classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter().map(|x| x / norm * cfg.prosody_offset).collect()
            })
            .collect();
        let unit_of = (0..k)
            .map(|c| {
                class_offsets.iter().map(|off| codebook.nearest(&noiseless_frame(&codebook, c, off)).0 as u32).collect()
            })
            .collect();
        Ok(Self { codebook, words, word_states, successors, class_offsets, unit_of })
    }

    /// True unit for a frame of `state` (a centroid index) in `class`.
    pub fn true_unit(&self, state: u32, class: usize) -> u32 {
        self.unit_of[state as usize][class]
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub pair: AlignedPair,
    pub features: FeatureMatrix,
    /// Pronunciation state (centroid index) of every frame.
    pub states: Vec<u32>,
    pub label: usize,
}

struct Rendered {
    states: Vec<u32>,
    words: Vec<WordAlignment>,
}

/// Lays out words frame by frame with sampled durations.
fn render_words(world: &SynthWorld, cfg: &SynthConfig, word_ids: &[usize], rng: &mut ChaCha20Rng) -> Rendered {
    let rate = FRAME_RATE_HZ;
    let mut states = Vec::new();
    let mut words = Vec::with_capacity(word_ids.len());
    for &w in word_ids {
        let sec = rng.random_range(cfg.min_word_sec..=cfg.max_word_sec);
        let frames = ((sec * rate).round() as usize).max(1);
        let start = states.len();
        let st = &world.word_states[w];
        for f in 0..frames {
            states.push(st[f * st.len() / frames]);
        }
        words.push(WordAlignment::new(world.words[w].clone(), start as f64 / rate, states.len() as f64 / rate));
    }
    Rendered { states, words }
}

fn sample_word_ids(world: &SynthWorld, cfg: &SynthConfig, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut ids = Vec::with_capacity(n);
    let mut w = rng.random_range(0..cfg.lexicon_size);
    for _ in 0..n {
        ids.push(w);
        w = *world.successors[w].choose(rng).expect("successors non-empty");
    }
    ids
}

fn utterance(
    world: &SynthWorld,
    cfg: &SynthConfig,
    id: String,
    rng: &mut ChaCha20Rng,
) -> Result<SynthUtterance, SynthError> {
    let label = rng.random_range(0..cfg.prosody_classes);
    let word_ids = sample_word_ids(world, cfg, rng);
    let Rendered { states, words } = render_words(world, cfg, &word_ids, rng);
    let offset = &world.class_offsets[label];
    let mut data = Vec::with_capacity(states.len() * cfg.feature_dim);
    for &s in &states {
        let base = noiseless_frame(&world.codebook, s as usize, offset);
        for b in base {
            let n: f64 = StandardNormal.sample(rng);
            data.push(b + (cfg.noise * n) as f32);
        }
    }
    let features = FeatureMatrix::new(states.len(), cfg.feature_dim, data)?;
    let units = states.iter().map(|&s| world.true_unit(s, label)).collect();
    let pair = AlignedPair::new(id, units, words, None)?;
    Ok(SynthUtterance { pair, features, states, label })
}

/// A generated corpus and the world behind it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub world: SynthWorld,
    pub utterances: Vec<SynthUtterance>,
}

/// Generates `cfg.n_samples` utterances. Utterance `i` depends only on
/// `(seed, i)`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    let world = SynthWorld::new(cfg)?;
    let utterances = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(cfg.seed, "utterance", i as u64);
            utterance(&world, cfg, format!("utt{i:06}"), &mut rng)
        })
        .collect::<Result<_, _>>()?;
    Ok(SynthCorpus { world, utterances })
}

/// Generates `cfg.n_samples` single-turn dialogs. The response text follows
/// `cfg.response_rule`; its units are the noiseless rendering of the
/// response words in the input's prosody class.
pub fn generate_dialogs(cfg: &SynthConfig) -> Result<Vec<DialogSample>, SynthError> {
    let rule = ResponseRule::parse(&cfg.response_rule)?;
    let world = SynthWorld::new(cfg)?;
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(cfg.seed, "dialog", i as u64);
            let u = utterance(&world, cfg, format!("dlg{i:06}"), &mut rng)?;
            let index: std::collections::HashMap<&str, usize> =
                world.words.iter().enumerate().map(|(j, w)| (w.as_str(), j)).collect();
            let input_words: Vec<String> = u.pair.words.iter().map(|w| w.word.clone()).collect();
            let response_text = rule.apply(&input_words);
            let response_ids: Vec<usize> = response_text.iter().map(|w| index[w.as_str()]).collect();
            let rendered = render_words(&world, cfg, &response_ids, &mut rng);
            let response_units = rendered.states.iter().map(|&s| world.true_unit(s, u.label)).collect();
            Ok(DialogSample { input: u.pair, response_text, response_units })
        })
        .collect()
}

/// Per-utterance metadata: frame count and prosody class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    pub n_frames: usize,
    pub label: usize,
}

/// File names written by [`write_corpus_dir`].
pub mod files {
    pub const WORDS: &str = "words.jsonl";
    pub const UNITS: &str = "units.jsonl";
    pub const FEATURES: &str = "features.usdf";
    pub const META: &str = "meta.jsonl";
    pub const CODEBOOK: &str = "codebook.usdc";
    pub const DIALOGS: &str = "dialogs.jsonl";
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), SynthError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes words, units, metadata, the concatenated features of every
/// utterance (in order) and the true codebook into `dir`.
pub fn write_corpus_dir(corpus: &SynthCorpus, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let us = &corpus.utterances;
    write_jsonl(
        &dir.join(files::WORDS),
        us.iter().map(|u| WordsRecord { id: u.pair.id.clone(), words: u.pair.words.clone() }),
    )?;
    write_jsonl(
        &dir.join(files::UNITS),
        us.iter().map(|u| UnitsRecord { id: u.pair.id.clone(), units: u.pair.units.clone() }),
    )?;
    write_jsonl(
        &dir.join(files::META),
        us.iter().map(|u| MetaRecord { id: u.pair.id.clone(), n_frames: u.features.n_rows(), label: u.label }),
    )?;
    let dim = us.first().map_or(corpus.world.codebook.dim(), |u| u.features.dim());
    let data: Vec<f32> = us.iter().flat_map(|u| u.features.as_slice().iter().copied()).collect();
    FeatureMatrix::new(data.len() / dim.max(1), dim, data)?.save(dir.join(files::FEATURES))?;
    corpus.world.codebook.save(dir.join(files::CODEBOOK))?;
    Ok(())
}

pub fn write_dialogs(dialogs: &[DialogSample], path: &Path) -> Result<(), SynthError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dialogs_jsonl(&mut w, dialogs)?;
    w.flush()?;
    Ok(())
}
