//! Pluggable text tokenization.
//!
//! The default [`Lexicon`] is a whitespace-word tokenizer over a lexicon
//! collected from a corpus, with one out-of-vocabulary id. Ids are drawn from
//! the text region of a [`VocabLayout`] in ascending order, skipping the
//! reserved control ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{format_hash, VocabLayout};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("lexicon of {words} words plus OOV needs {needed} text ids, layout has {available} free")]
    TooManyWords { words: usize, needed: usize, available: usize },
    #[error("lexicon was built for layout {expected}, not {got}")]
    LayoutMismatch { expected: String, got: String },
    #[error("lexicon id {id} for {word:?} is a control id or outside the text region")]
    BadId { word: String, id: u32 },
    #[error("malformed lexicon file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps words to text-region token ids.
pub trait TextTokenizer: Sync {
    /// Ids for a single word. Must be non-empty for any input.
    fn encode_word(&self, word: &str) -> Vec<u32>;

    fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32>
    where
        Self: Sized,
    {
        words.iter().flat_map(|w| self.encode_word(w.as_ref())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    layout_hash: u64,
    oov_id: u32,
    ids: HashMap<String, u32>,
    words: BTreeMap<u32, String>,
}

impl Lexicon {
    /// Builds a lexicon over the distinct words of `corpus_words`, assigning
    /// ids in lexicographic word order.
    pub fn build<I, S>(corpus_words: I, layout: &VocabLayout) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> = corpus_words.into_iter().map(|w| w.as_ref().to_string()).collect();
        let c = layout.controls();
        let reserved = [c.bos, c.eos, c.sep_a, c.sep_b];
        let mut free = (0..layout.text_size()).filter(|id| !reserved.contains(id));
        let available = layout.text_size() as usize - reserved.len();
        let needed = distinct.len() + 1;
        if needed > available {
            return Err(TokenizerError::TooManyWords { words: distinct.len(), needed, available });
        }
        let oov_id = free.next().expect("checked above");
        let mut ids = HashMap::with_capacity(distinct.len());
        let mut words = BTreeMap::new();
        for (w, id) in distinct.into_iter().zip(free) {
            ids.insert(w.clone(), id);
            words.insert(id, w);
        }
        Ok(Self { layout_hash: layout.hash(), oov_id, ids, words })
    }

    pub fn oov_id(&self) -> u32 {
        self.oov_id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn layout_hash(&self) -> u64 {
        self.layout_hash
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(&id).map(String::as_str)
    }

    pub fn check_layout(&self, layout: &VocabLayout) -> Result<(), TokenizerError> {
        if layout.hash() != self.layout_hash {
            return Err(TokenizerError::LayoutMismatch {
                expected: format_hash(self.layout_hash),
                got: format_hash(layout.hash()),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            layout_hash: format_hash(self.layout_hash),
            oov_id: self.oov_id,
            words: self.words.iter().map(|(id, w)| (w.clone(), *id)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("lexicon serializes")
    }

    /// Parses a lexicon file and checks its ids against `layout`.
    pub fn from_json(s: &str, layout: &VocabLayout) -> Result<Self, TokenizerError> {
        let file: LexiconFile = serde_json::from_str(s).map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        let layout_hash = u64::from_str_radix(&file.layout_hash, 16)
            .map_err(|e| TokenizerError::Malformed(format!("layout_hash: {e}")))?;
        let lex = Self {
            layout_hash,
            oov_id: file.oov_id,
            words: file.words.iter().map(|(w, id)| (*id, w.clone())).collect(),
            ids: file.words.into_iter().collect(),
        };
        lex.check_layout(layout)?;
        let c = layout.controls();
        let reserved = [c.bos, c.eos, c.sep_a, c.sep_b];
        let entries = lex.ids.iter().map(|(w, &id)| (w.as_str(), id));
        for (w, id) in entries.chain([("<oov>", lex.oov_id)]) {
            if id >= layout.text_size() || reserved.contains(&id) {
                return Err(TokenizerError::BadId { word: w.to_string(), id });
            }
        }
        if lex.words.len() != lex.ids.len() || lex.words.contains_key(&lex.oov_id) {
            return Err(TokenizerError::Malformed("duplicate ids".into()));
        }
        Ok(lex)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, layout: &VocabLayout) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?, layout)
    }
}

impl TextTokenizer for Lexicon {
    fn encode_word(&self, word: &str) -> Vec<u32> {
        vec![self.id(word).unwrap_or(self.oov_id)]
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    layout_hash: String,
    oov_id: u32,
    words: BTreeMap<String, u32>,
}
