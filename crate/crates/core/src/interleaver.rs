//! Interleaved speech-text sequence construction.
//!
//! Each aligned pair is built in three steps:
//!
//! 1. **Segmentation.** The word list is cut into `N = floor(S / 10) + 1`
//!    contiguous segments (capped by the word count), where `S` is the
//!    utterance duration in seconds. Cuts are snapped to word ends so that
//!    segment durations are as equal as possible.
//! 2. **Selection.** Every segment independently picks a main modality
//!    (unit or text, fair coin) and whether to append a copy of itself in
//!    the other modality (Bernoulli, default 0.5).
//! 3. **Rendering.** Blocks are emitted in order. A sub-modality copy is
//!    introduced by `<|correspond|>`; a later segment in a different modality
//!    is introduced by `<|continue|>`; same-modality junctions get nothing.

use std::io::{BufRead, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{validate_pair, AlignedPair};
use crate::rng::{bernoulli, coin, sample_rng};
use crate::span::Span;
use crate::tokenizer::TextTokenizer;
use crate::vocab::{Modality, Special, VocabError, VocabLayout};

/// Seconds of speech per additional segment.
pub const SECONDS_PER_SEGMENT: f64 = 10.0;

/// Default probability of inserting the other-modality copy of a segment.
pub const DEFAULT_INSERT_PROB: f64 = 0.5;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InterleaveError {
    #[error("cannot segment an utterance with no words")]
    NoWords,
    #[error("invalid aligned pair {id:?}: {detail}")]
    InvalidPair { id: String, detail: String },
    #[error("{choices} choices for {segments} segments")]
    ChoiceCount { choices: usize, segments: usize },
    #[error("segment {segment} rendered no {modality} tokens")]
    EmptyBlock { segment: usize, modality: Modality },
    #[error("insertion probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("main modality must be text or unit")]
    BadMainModality,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of segments for an utterance of `duration_sec` seconds and
/// `n_words` words.
pub fn segment_count(duration_sec: f64, n_words: usize) -> usize {
    let n = (duration_sec.max(0.0) / SECONDS_PER_SEGMENT).floor() as usize + 1;
    n.min(n_words).max(1)
}

/// Contiguous grouping of a pair's words into segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationPlan {
    starts: Vec<usize>,
    n_words: usize,
}

impl SegmentationPlan {
    /// `starts` holds the first word index of every segment.
    pub fn from_starts(starts: Vec<usize>, n_words: usize) -> Result<Self, InterleaveError> {
        let ok = starts.first() == Some(&0)
            && starts.windows(2).all(|w| w[0] < w[1])
            && starts.last().is_some_and(|&s| s < n_words);
        if !ok {
            return Err(InterleaveError::InvalidPair {
                id: String::new(),
                detail: format!("segment starts {starts:?} do not partition {n_words} words"),
            });
        }
        Ok(Self { starts, n_words })
    }

    pub fn n_segments(&self) -> usize {
        self.starts.len()
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Word indices of segment `i`.
    pub fn words(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.starts.get(i + 1).copied().unwrap_or(self.n_words);
        self.starts[i]..end
    }

    /// Unit frames of segment `i`.
    pub fn units(&self, pair: &AlignedPair, i: usize) -> Span {
        let w = self.words(i);
        pair.unit_range(w.start, w.end)
    }
}

/// Splits the words of `pair` into `n` groups of near-equal duration.
///
/// The cut for boundary `i` goes after the first word whose end time reaches
/// `i * S / n`. A cut that would leave the current segment empty moves later;
/// one that would starve the remaining segments moves earlier.
pub fn plan_with_count(pair: &AlignedPair, n: usize) -> Result<SegmentationPlan, InterleaveError> {
    let n_words = pair.words.len();
    if n_words == 0 {
        return Err(InterleaveError::NoWords);
    }
    let n = n.clamp(1, n_words);
    let total = pair.duration_sec;
    let mut starts = Vec::with_capacity(n);
    starts.push(0);
    let mut prev = 0usize;
    for i in 1..n {
        let target = i as f64 * total / n as f64;
        let cut = pair.words[prev..].iter().position(|w| w.end + TIME_EPS >= target).map_or(n_words, |j| prev + j + 1);
        let cut = cut.max(prev + 1).min(n_words - (n - i));
        starts.push(cut);
        prev = cut;
    }
    SegmentationPlan::from_starts(starts, n_words)
}

/// Segmentation with the duration-driven segment count.
pub fn plan_segments(pair: &AlignedPair) -> Result<SegmentationPlan, InterleaveError> {
    if pair.words.is_empty() {
        return Err(InterleaveError::NoWords);
    }
    plan_with_count(pair, segment_count(pair.duration_sec, pair.words.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentChoice {
    pub main: Modality,
    pub insert_sub: bool,
}

/// Draws the per-segment choices, consuming exactly two 64-bit draws per
/// segment: main modality (unit on heads) then sub-insertion.
pub fn draw_choices(
    plan: &SegmentationPlan,
    rng: &mut impl RngCore,
    insert_prob: f64,
) -> Result<Vec<SegmentChoice>, InterleaveError> {
    if !(0.0..=1.0).contains(&insert_prob) {
        return Err(InterleaveError::BadProbability(insert_prob));
    }
    Ok((0..plan.n_segments())
        .map(|_| {
            let main = if coin(rng) { Modality::Unit } else { Modality::Text };
            let insert_sub = bernoulli(rng, insert_prob);
            SegmentChoice { main, insert_sub }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Main,
    Sub,
}

/// Where a token came from. Relationship tokens carry the provenance of the
/// block they introduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub segment: u32,
    pub role: Role,
}

/// Token ids with per-token modality tags and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterleavedSequence {
    pub id: String,
    pub seed: u64,
    pub ids: Vec<u32>,
    pub tags: Vec<Modality>,
    pub provenance: Vec<Provenance>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count_id(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&x| x == id).count()
    }

    pub(crate) fn push_block(&mut self, ids: &[u32], modality: Modality, prov: Provenance) {
        self.ids.extend_from_slice(ids);
        self.tags.extend(std::iter::repeat_n(modality, ids.len()));
        self.provenance.extend(std::iter::repeat_n(prov, ids.len()));
    }

    pub(crate) fn push_special(&mut self, layout: &VocabLayout, special: Special, prov: Provenance) {
        self.ids.push(layout.special_id(special));
        self.tags.push(Modality::Special);
        self.provenance.push(prov);
    }

    pub fn to_record(&self) -> SequenceRecord {
        SequenceRecord {
            id: self.id.clone(),
            ids: self.ids.clone(),
            tags: self.tags.iter().map(|t| t.tag()).collect(),
            seed: self.seed,
        }
    }
}

/// JSON Lines form of a sequence: `{"id", "ids", "tags", "seed"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub ids: Vec<u32>,
    pub tags: Vec<u8>,
    pub seed: u64,
}

pub fn write_sequences_jsonl<'a>(
    mut w: impl Write,
    seqs: impl IntoIterator<Item = &'a InterleavedSequence>,
) -> Result<(), InterleaveError> {
    for s in seqs {
        serde_json::to_writer(&mut w, &s.to_record())
            .map_err(|e| InterleaveError::Jsonl { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sequences_jsonl(r: impl BufRead) -> Result<Vec<SequenceRecord>, InterleaveError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| InterleaveError::Jsonl { line: i + 1, message: e.to_string() })?;
        if rec.tags.len() != rec.ids.len() {
            return Err(InterleaveError::Jsonl {
                line: i + 1,
                message: format!("{} tags for {} ids", rec.tags.len(), rec.ids.len()),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Token ids for the units in `span`.
pub(crate) fn unit_ids(pair: &AlignedPair, span: Span, layout: &VocabLayout) -> Result<Vec<u32>, VocabError> {
    pair.units[span.range()].iter().map(|&u| layout.unit_to_id(u)).collect()
}

/// Token ids for words `[first, last)`.
pub(crate) fn text_ids<T: TextTokenizer>(pair: &AlignedPair, words: std::ops::Range<usize>, tok: &T) -> Vec<u32> {
    pair.words[words].iter().flat_map(|w| tok.encode_word(&w.word)).collect()
}

/// Content of one segment in one modality.
pub fn segment_content<T: TextTokenizer>(
    pair: &AlignedPair,
    plan: &SegmentationPlan,
    segment: usize,
    modality: Modality,
    layout: &VocabLayout,
    tok: &T,
) -> Result<Vec<u32>, InterleaveError> {
    let ids = match modality {
        Modality::Unit => unit_ids(pair, plan.units(pair, segment), layout)?,
        Modality::Text => text_ids(pair, plan.words(segment), tok),
        Modality::Special => return Err(InterleaveError::BadMainModality),
    };
    if ids.is_empty() {
        return Err(InterleaveError::EmptyBlock { segment, modality });
    }
    Ok(ids)
}

struct Block {
    prov: Provenance,
    modality: Modality,
    ids: Vec<u32>,
}

fn expected_blocks<T: TextTokenizer>(
    pair: &AlignedPair,
    plan: &SegmentationPlan,
    choices: &[SegmentChoice],
    layout: &VocabLayout,
    tok: &T,
) -> Result<Vec<Block>, InterleaveError> {
    if choices.len() != plan.n_segments() {
        return Err(InterleaveError::ChoiceCount { choices: choices.len(), segments: plan.n_segments() });
    }
    let mut blocks = Vec::with_capacity(2 * choices.len());
    for (s, c) in choices.iter().enumerate() {
        if c.main == Modality::Special {
            return Err(InterleaveError::BadMainModality);
        }
        let segment = s as u32;
        blocks.push(Block {
            prov: Provenance { segment, role: Role::Main },
            modality: c.main,
            ids: segment_content(pair, plan, s, c.main, layout, tok)?,
        });
        if c.insert_sub {
            let other = c.main.other();
            blocks.push(Block {
                prov: Provenance { segment, role: Role::Sub },
                modality: other,
                ids: segment_content(pair, plan, s, other, layout, tok)?,
            });
        }
    }
    Ok(blocks)
}

/// The relationship token (if any) that precedes `next` when it follows
/// `prev`.
fn junction(prev: &Block, next: &Block) -> Option<Special> {
    if next.prov.role == Role::Sub {
        Some(Special::Correspond)
    } else if next.modality != prev.modality {
        Some(Special::Continue)
    } else {
        None
    }
}

/// Renders the token sequence for a pair under a plan and its choices.
pub fn render<T: TextTokenizer>(
    pair: &AlignedPair,
    plan: &SegmentationPlan,
    choices: &[SegmentChoice],
    layout: &VocabLayout,
    tok: &T,
) -> Result<InterleavedSequence, InterleaveError> {
    let blocks = expected_blocks(pair, plan, choices, layout, tok)?;
    let mut seq = InterleavedSequence { id: pair.id.clone(), ..Default::default() };
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            if let Some(sp) = junction(&blocks[i - 1], b) {
                seq.push_special(layout, sp, b.prov);
            }
        }
        seq.push_block(&b.ids, b.modality, b.prov);
    }
    Ok(seq)
}

/// Everything needed to rebuild or verify one sample.
#[derive(Debug, Clone)]
pub struct Interleaved {
    pub sequence: InterleavedSequence,
    pub plan: SegmentationPlan,
    pub choices: Vec<SegmentChoice>,
}

/// Full pipeline for one pair; the random stream is keyed by
/// `(corpus_seed, pair.id)`.
pub fn interleave_pair<T: TextTokenizer>(
    pair: &AlignedPair,
    corpus_seed: u64,
    insert_prob: f64,
    layout: &VocabLayout,
    tok: &T,
) -> Result<Interleaved, InterleaveError> {
    let report = validate_pair(pair);
    if !report.passed() {
        return Err(InterleaveError::InvalidPair { id: pair.id.clone(), detail: format!("{:?}", report.violations) });
    }
    let plan = plan_segments(pair)?;
    let mut rng = sample_rng(corpus_seed, &pair.id);
    let choices = draw_choices(&plan, &mut rng, insert_prob)?;
    let mut sequence = render(pair, &plan, &choices, layout, tok)?;
    sequence.seed = corpus_seed;
    Ok(Interleaved { sequence, plan, choices })
}

/// Grammar violations of a sequence, independent of its source pair: tag
/// consistency with the layout, and relationship tokens only as single
/// separators between content of different modalities.
pub fn grammar_violations(seq: &InterleavedSequence, layout: &VocabLayout) -> Vec<String> {
    let mut out = Vec::new();
    let n = seq.ids.len();
    if seq.tags.len() != n || seq.provenance.len() != n {
        out.push(format!("length mismatch: {n} ids, {} tags, {} provenance", seq.tags.len(), seq.provenance.len()));
        return out;
    }
    for (i, (&id, &tag)) in seq.ids.iter().zip(&seq.tags).enumerate() {
        match layout.modality_of(id) {
            Ok(m) if m == tag => {}
            Ok(m) => out.push(format!("token {i}: id {id} is {m} but tagged {tag}")),
            Err(e) => out.push(format!("token {i}: {e}")),
        }
    }
    for i in 0..n {
        if seq.tags[i] != Modality::Special {
            continue;
        }
        if i == 0 || i + 1 == n {
            out.push(format!("token {i}: relationship token at sequence boundary"));
            continue;
        }
        let (before, after) = (seq.tags[i - 1], seq.tags[i + 1]);
        if before == Modality::Special || after == Modality::Special {
            out.push(format!("token {i}: adjacent relationship tokens"));
        } else if before == after {
            out.push(format!("token {i}: relationship token at a same-modality junction"));
        }
    }
    out
}

/// Provenance-level soundness: `<|correspond|>` introduces the other-modality
/// copy of the segment just emitted; `<|continue|>` introduces a strictly
/// later segment.
pub fn relationship_violations(seq: &InterleavedSequence, layout: &VocabLayout) -> Vec<String> {
    let mut out = Vec::new();
    let n = seq.ids.len().min(seq.provenance.len());
    for i in 1..n.saturating_sub(1) {
        let (prev, next) = (seq.provenance[i - 1], seq.provenance[i + 1]);
        if seq.ids[i] == layout.correspond_id() {
            if next.role != Role::Sub || next.segment != prev.segment {
                out.push(format!("token {i}: <|correspond|> does not introduce segment {}'s copy", prev.segment));
            }
        } else if seq.ids[i] == layout.continue_id() && !(next.role == Role::Main && next.segment > prev.segment) {
            out.push(format!("token {i}: <|continue|> does not introduce a later segment"));
        }
    }
    out
}

/// Checks that `seq` is exactly the rendering of `(pair, plan, choices)`:
/// the plan partitions words and frames, the main-role tokens of each
/// segment reproduce the chosen modality's content, sub-role blocks appear
/// only where chosen, and relationship tokens sit exactly where the
/// placement rules put them.
pub fn verify_roundtrip<T: TextTokenizer>(
    seq: &InterleavedSequence,
    pair: &AlignedPair,
    plan: &SegmentationPlan,
    choices: &[SegmentChoice],
    layout: &VocabLayout,
    tok: &T,
) -> bool {
    if !validate_pair(pair).passed() || plan.n_words() != pair.words.len() {
        return false;
    }
    if !grammar_violations(seq, layout).is_empty() || !relationship_violations(seq, layout).is_empty() {
        return false;
    }
    let Ok(expected) = expected_blocks(pair, plan, choices, layout, tok) else {
        return false;
    };

    // split into content blocks and the relationship token before each
    let mut blocks: Vec<(Option<u32>, Block)> = Vec::new();
    let mut pending: Option<u32> = None;
    for i in 0..seq.ids.len() {
        let (id, tag, prov) = (seq.ids[i], seq.tags[i], seq.provenance[i]);
        if tag == Modality::Special {
            pending = Some(id);
            continue;
        }
        let extend = pending.is_none() && blocks.last().is_some_and(|(_, b)| b.prov == prov && b.modality == tag);
        if extend {
            blocks.last_mut().unwrap().1.ids.push(id);
        } else {
            blocks.push((pending.take(), Block { prov, modality: tag, ids: vec![id] }));
        }
    }
    if blocks.len() != expected.len() {
        return false;
    }

    // main-role coverage: every segment exactly once, in order
    let mains: Vec<u32> =
        blocks.iter().filter(|(_, b)| b.prov.role == Role::Main).map(|(_, b)| b.prov.segment).collect();
    if mains != (0..plan.n_segments() as u32).collect::<Vec<_>>() {
        return false;
    }

    for (i, ((sep, got), want)) in blocks.iter().zip(&expected).enumerate() {
        if got.prov != want.prov || got.modality != want.modality || got.ids != want.ids {
            return false;
        }
        let want_sep = if i == 0 { None } else { junction(&expected[i - 1], want).map(|s| layout.special_id(s)) };
        if *sep != want_sep {
            return false;
        }
    }
    true
}
