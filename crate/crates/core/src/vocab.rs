//! Unified token-id space for text, unit and relationship tokens.
//!
//! Ids are laid out in three contiguous regions:
//!
//! ```text
//! [0, T)            text tokens (control ids bos/eos/sep_a/sep_b live here)
//! [T, T + 2)        <|correspond|>, <|continue|>
//! [T + 2, T + 2 + K) acoustic units 0..K
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64;

/// Default number of acoustic unit clusters.
pub const DEFAULT_UNIT_COUNT: u32 = 10_000;

/// Smallest admissible text region: four control ids plus headroom.
pub const MIN_TEXT_SIZE: u32 = 8;

pub const CORRESPOND_TOKEN: &str = "<|correspond|>";
pub const CONTINUE_TOKEN: &str = "<|continue|>";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("text_size {0} is too small (need at least {MIN_TEXT_SIZE})")]
    TextSizeTooSmall(u32),
    #[error("unit_count must be positive")]
    NoUnits,
    #[error("vocabulary size overflows u32")]
    Overflow,
    #[error("control id {id} ({name}) is outside the text region [0, {text_size})")]
    ControlOutOfRange { name: &'static str, id: u32, text_size: u32 },
    #[error("control ids are not pairwise distinct")]
    ControlCollision,
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: u32 },
    #[error("unit index {unit} outside codebook of size {unit_count}")]
    UnitOutOfRange { unit: u32, unit_count: u32 },
    #[error("layout hash mismatch: file says {stored}, content hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("malformed layout file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse modality of a token id. The numeric tag is the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Modality {
    Text = 0,
    Unit = 1,
    Special = 2,
}

impl Modality {
    pub fn tag(self) -> u8 {
        self as u8
    }

    /// The other content modality. `Special` maps to itself.
    pub fn other(self) -> Modality {
        match self {
            Modality::Text => Modality::Unit,
            Modality::Unit => Modality::Text,
            Modality::Special => Modality::Special,
        }
    }
}

impl From<Modality> for u8 {
    fn from(m: Modality) -> u8 {
        m.tag()
    }
}

impl TryFrom<u8> for Modality {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Unit),
            2 => Ok(Modality::Special),
            other => Err(format!("invalid modality tag {other}")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Unit => "unit",
            Modality::Special => "special",
        })
    }
}

/// The two relationship tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Special {
    Correspond,
    Continue,
}

impl Special {
    pub fn name(self) -> &'static str {
        match self {
            Special::Correspond => CORRESPOND_TOKEN,
            Special::Continue => CONTINUE_TOKEN,
        }
    }
}

/// A decoded token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    Special(Special),
    Unit(u32),
}

/// Reserved control ids inside the text region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlIds {
    pub bos: u32,
    pub eos: u32,
    pub sep_a: u32,
    pub sep_b: u32,
}

impl Default for ControlIds {
    fn default() -> Self {
        Self { bos: 0, eos: 1, sep_a: 2, sep_b: 3 }
    }
}

/// The unified id space. Immutable once built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VocabLayout {
    text_size: u32,
    unit_count: u32,
    controls: ControlIds,
}

impl VocabLayout {
    /// Layout with the default control ids 0..=3.
    pub fn new(text_size: u32, unit_count: u32) -> Result<Self, VocabError> {
        Self::with_controls(text_size, unit_count, ControlIds::default())
    }

    pub fn with_controls(text_size: u32, unit_count: u32, controls: ControlIds) -> Result<Self, VocabError> {
        if text_size < MIN_TEXT_SIZE {
            return Err(VocabError::TextSizeTooSmall(text_size));
        }
        if unit_count == 0 {
            return Err(VocabError::NoUnits);
        }
        text_size.checked_add(2).and_then(|v| v.checked_add(unit_count)).ok_or(VocabError::Overflow)?;
        let named =
            [("bos", controls.bos), ("eos", controls.eos), ("sep_a", controls.sep_a), ("sep_b", controls.sep_b)];
        for (name, id) in named {
            if id >= text_size {
                return Err(VocabError::ControlOutOfRange { name, id, text_size });
            }
        }
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                if named[i].1 == named[j].1 {
                    return Err(VocabError::ControlCollision);
                }
            }
        }
        Ok(Self { text_size, unit_count, controls })
    }

    pub fn text_size(&self) -> u32 {
        self.text_size
    }

    pub fn unit_count(&self) -> u32 {
        self.unit_count
    }

    /// Total number of ids, T + 2 + K.
    pub fn vocab_size(&self) -> u32 {
        self.text_size + 2 + self.unit_count
    }

    pub fn controls(&self) -> ControlIds {
        self.controls
    }

    pub fn bos_id(&self) -> u32 {
        self.controls.bos
    }

    pub fn eos_id(&self) -> u32 {
        self.controls.eos
    }

    pub fn sep_a_id(&self) -> u32 {
        self.controls.sep_a
    }

    pub fn sep_b_id(&self) -> u32 {
        self.controls.sep_b
    }

    pub fn correspond_id(&self) -> u32 {
        self.text_size
    }

    pub fn continue_id(&self) -> u32 {
        self.text_size + 1
    }

    pub fn special_id(&self, special: Special) -> u32 {
        match special {
            Special::Correspond => self.correspond_id(),
            Special::Continue => self.continue_id(),
        }
    }

    /// Number of ids belonging to a modality.
    pub fn modality_size(&self, modality: Modality) -> u32 {
        match modality {
            Modality::Text => self.text_size,
            Modality::Unit => self.unit_count,
            Modality::Special => 2,
        }
    }

    /// Half-open id range of a modality region.
    pub fn modality_range(&self, modality: Modality) -> std::ops::Range<u32> {
        match modality {
            Modality::Text => 0..self.text_size,
            Modality::Special => self.text_size..self.text_size + 2,
            Modality::Unit => self.text_size + 2..self.vocab_size(),
        }
    }

    pub fn modality_of(&self, id: u32) -> Result<Modality, VocabError> {
        if id < self.text_size {
            Ok(Modality::Text)
        } else if id < self.text_size + 2 {
            Ok(Modality::Special)
        } else if id < self.vocab_size() {
            Ok(Modality::Unit)
        } else {
            Err(VocabError::IdOutOfRange { id, size: self.vocab_size() })
        }
    }

    pub fn unit_to_id(&self, unit: u32) -> Result<u32, VocabError> {
        if unit >= self.unit_count {
            return Err(VocabError::UnitOutOfRange { unit, unit_count: self.unit_count });
        }
        Ok(self.text_size + 2 + unit)
    }

    pub fn id_to_token(&self, id: u32) -> Result<Token, VocabError> {
        Ok(match self.modality_of(id)? {
            Modality::Text => Token::Text(id),
            Modality::Special if id == self.correspond_id() => Token::Special(Special::Correspond),
            Modality::Special => Token::Special(Special::Continue),
            Modality::Unit => Token::Unit(id - self.text_size - 2),
        })
    }

    /// Canonical serialization the content hash is computed over.
    pub fn canonical(&self) -> String {
        format!(
            "text_size={};unit_count={};bos={};eos={};sep_a={};sep_b={}",
            self.text_size,
            self.unit_count,
            self.controls.bos,
            self.controls.eos,
            self.controls.sep_a,
            self.controls.sep_b
        )
    }

    /// 64-bit FNV-1a of [`VocabLayout::canonical`]. Embedded in every
    /// downstream corpus and scorer file.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    pub fn to_json(&self) -> String {
        let file = LayoutFile {
            text_size: self.text_size,
            unit_count: self.unit_count,
            bos_id: self.controls.bos,
            eos_id: self.controls.eos,
            sep_a_id: self.controls.sep_a,
            sep_b_id: self.controls.sep_b,
            hash: format_hash(self.hash()),
        };
        serde_json::to_string_pretty(&file).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let file: LayoutFile = serde_json::from_str(s).map_err(|e| VocabError::Malformed(e.to_string()))?;
        let layout = Self::with_controls(
            file.text_size,
            file.unit_count,
            ControlIds { bos: file.bos_id, eos: file.eos_id, sep_a: file.sep_a_id, sep_b: file.sep_b_id },
        )?;
        let computed = format_hash(layout.hash());
        if !computed.eq_ignore_ascii_case(&file.hash) {
            return Err(VocabError::HashMismatch { stored: file.hash, computed });
        }
        Ok(layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Hex rendering used for hashes in text files.
pub fn format_hash(h: u64) -> String {
    format!("{h:016x}")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    text_size: u32,
    unit_count: u32,
    bos_id: u32,
    eos_id: u32,
    sep_a_id: u32,
    sep_b_id: u32,
    hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(100, DEFAULT_UNIT_COUNT).unwrap()
    }

    #[test]
    fn special_and_unit_ids() {
        let l = layout();
        assert_eq!(l.correspond_id(), 100);
        assert_eq!(l.continue_id(), 101);
        assert_eq!(l.unit_to_id(0).unwrap(), 102);
        assert_eq!(l.unit_to_id(9999).unwrap(), 10101);
        assert_eq!(l.vocab_size() - 1, 10101);
        assert_eq!(DEFAULT_UNIT_COUNT, 10_000);
    }

    #[test]
    fn modality_regions() {
        let l = layout();
        assert_eq!(l.modality_of(5).unwrap(), Modality::Text);
        assert_eq!(l.modality_of(101).unwrap(), Modality::Special);
        assert_eq!(l.modality_of(10101).unwrap(), Modality::Unit);
        assert!(matches!(l.modality_of(10102), Err(VocabError::IdOutOfRange { .. })));
    }

    #[test]
    fn unit_out_of_range() {
        assert!(matches!(layout().unit_to_id(10_000), Err(VocabError::UnitOutOfRange { .. })));
    }

    #[test]
    fn rejects_tiny_text_region() {
        assert!(matches!(VocabLayout::new(7, 10), Err(VocabError::TextSizeTooSmall(7))));
        assert!(VocabLayout::new(8, 10).is_ok());
    }

    #[test]
    fn rejects_bad_controls() {
        let c = ControlIds { bos: 0, eos: 0, sep_a: 2, sep_b: 3 };
        assert!(matches!(VocabLayout::with_controls(100, 10, c), Err(VocabError::ControlCollision)));
        let c = ControlIds { bos: 100, eos: 1, sep_a: 2, sep_b: 3 };
        assert!(matches!(VocabLayout::with_controls(100, 10, c), Err(VocabError::ControlOutOfRange { .. })));
    }

    #[test]
    fn special_tokens_decode() {
        let l = layout();
        assert_eq!(l.id_to_token(100).unwrap(), Token::Special(Special::Correspond));
        assert_eq!(l.id_to_token(101).unwrap(), Token::Special(Special::Continue));
        assert_eq!(l.id_to_token(7).unwrap(), Token::Text(7));
    }

    #[test]
    fn json_roundtrip_and_tamper() {
        let l = VocabLayout::with_controls(64, 128, ControlIds { bos: 10, eos: 11, sep_a: 12, sep_b: 13 }).unwrap();
        let s = l.to_json();
        let back = VocabLayout::from_json(&s).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.hash(), l.hash());
        let tampered = s.replace("\"unit_count\": 128", "\"unit_count\": 129");
        assert!(matches!(VocabLayout::from_json(&tampered), Err(VocabError::HashMismatch { .. })));
    }

    #[test]
    fn hash_distinguishes_layouts() {
        let a = VocabLayout::new(100, 10).unwrap();
        let b = VocabLayout::new(100, 11).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    proptest! {
        #[test]
        fn unit_roundtrip(t in 8u32..5000, k in 1u32..20_000, u in 0u32..20_000) {
            let l = VocabLayout::new(t, k).unwrap();
            let u = u % k;
            let id = l.unit_to_id(u).unwrap();
            prop_assert_eq!(l.id_to_token(id).unwrap(), Token::Unit(u));
            prop_assert_eq!(l.modality_of(id).unwrap(), Modality::Unit);
        }

        #[test]
        fn every_id_has_one_modality(t in 8u32..200, k in 1u32..200) {
            let l = VocabLayout::new(t, k).unwrap();
            let mut counts = [0u32; 3];
            for id in 0..l.vocab_size() {
                let m = l.modality_of(id).unwrap();
                prop_assert!(l.modality_range(m).contains(&id));
                counts[m.tag() as usize] += 1;
            }
            prop_assert_eq!(counts, [t, k, 2]);
        }
    }
}
