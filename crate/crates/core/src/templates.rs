//! Fine-tuning templates, ablation pretraining sequences and evaluation
//! sequences.
//!
//! Spoken-dialog template (one turn):
//!
//! ```text
//! <bos> U(S1) <|correspond|> | T1 <sep_a> | T2 <|correspond|> | U2 <eos>
//!    prompt                  | transcript | answer_text       | answer_units
//! ```
//!
//! Loss is taken on the transcript, answer text and answer units, each
//! including its terminating token. The prompt is never trained on.

use std::io::{BufRead, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{validate_pair, AlignedPair, AlignmentError, WordAlignment};
use crate::interleaver::{
    draw_choices, plan_segments, plan_with_count, render, segment_content, text_ids, unit_ids, InterleaveError,
    InterleavedSequence, Provenance, Role, SegmentationPlan,
};
use crate::rng::{coin, sample_rng};
use crate::span::Span;
use crate::tokenizer::TextTokenizer;
use crate::vocab::{Modality, Special, VocabError, VocabLayout};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("dialog {0:?} has an empty response text")]
    EmptyResponseText(String),
    #[error("dialog {0:?} has no response units")]
    EmptyResponseUnits(String),
    #[error("pair {id:?} has {words} word(s); a two-way split needs at least 2")]
    DegenerateSplit { id: String, words: usize },
    #[error("invalid input pair {id:?}: {detail}")]
    InvalidPair { id: String, detail: String },
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Interleave(#[from] InterleaveError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single-turn spoken dialog: input speech with its transcript, and the
/// response as text and units.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogSample {
    pub input: AlignedPair,
    pub response_text: Vec<String>,
    pub response_units: Vec<u32>,
}

impl DialogSample {
    pub fn id(&self) -> &str {
        &self.input.id
    }

    fn check(&self) -> Result<(), TemplateError> {
        let report = validate_pair(&self.input);
        if !report.passed() {
            return Err(TemplateError::InvalidPair {
                id: self.input.id.clone(),
                detail: format!("{:?}", report.violations),
            });
        }
        if self.response_text.is_empty() {
            return Err(TemplateError::EmptyResponseText(self.input.id.clone()));
        }
        if self.response_units.is_empty() {
            return Err(TemplateError::EmptyResponseUnits(self.input.id.clone()));
        }
        Ok(())
    }

    pub fn to_record(&self) -> DialogRecord {
        DialogRecord {
            id: self.input.id.clone(),
            input_units: self.input.units.clone(),
            input_words: self.input.words.clone(),
            response_text: self.response_text.join(" "),
            response_units: self.response_units.clone(),
        }
    }

    pub fn from_record(rec: DialogRecord) -> Result<Self, TemplateError> {
        Ok(Self {
            input: AlignedPair::new(rec.id, rec.input_units, rec.input_words, None)?,
            response_text: rec.response_text.split_whitespace().map(str::to_string).collect(),
            response_units: rec.response_units,
        })
    }
}

/// JSON Lines form of a [`DialogSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub id: String,
    pub input_units: Vec<u32>,
    pub input_words: Vec<WordAlignment>,
    pub response_text: String,
    pub response_units: Vec<u32>,
}

pub fn write_dialogs_jsonl<'a>(
    mut w: impl Write,
    dialogs: impl IntoIterator<Item = &'a DialogSample>,
) -> Result<(), TemplateError> {
    for d in dialogs {
        serde_json::to_writer(&mut w, &d.to_record())
            .map_err(|e| TemplateError::Jsonl { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dialogs_jsonl(r: impl BufRead) -> Result<Vec<DialogSample>, TemplateError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord =
            serde_json::from_str(&line).map_err(|e| TemplateError::Jsonl { line: i + 1, message: e.to_string() })?;
        out.push(DialogSample::from_record(rec)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Prompt,
    Transcript,
    AnswerText,
    AnswerUnits,
}

impl Region {
    pub fn trained(self) -> bool {
        self != Region::Prompt
    }
}

/// Token ids with a loss mask and the named regions they fall into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: String,
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub regions: Vec<(Region, Span)>,
}

impl TrainingSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn region(&self, r: Region) -> Option<Span> {
        self.regions.iter().find(|(name, _)| *name == r).map(|&(_, s)| s)
    }

    /// A pretraining sequence, trained on every token.
    pub fn from_sequence(seq: &InterleavedSequence) -> Self {
        Self { id: seq.id.clone(), ids: seq.ids.clone(), loss_mask: vec![true; seq.ids.len()], regions: Vec::new() }
    }

    /// Mask derived from the region map alone.
    pub fn expected_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.ids.len()];
        for &(r, s) in &self.regions {
            if r.trained() {
                mask[s.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

struct Builder {
    sample: TrainingSample,
}

impl Builder {
    fn new(id: &str) -> Self {
        Self {
            sample: TrainingSample { id: id.to_string(), ids: Vec::new(), loss_mask: Vec::new(), regions: Vec::new() },
        }
    }

    fn region(&mut self, region: Region, parts: &[&[u32]]) {
        let lo = self.sample.ids.len();
        for p in parts {
            self.sample.ids.extend_from_slice(p);
        }
        let hi = self.sample.ids.len();
        self.sample.loss_mask.extend(std::iter::repeat_n(region.trained(), hi - lo));
        self.sample.regions.push((region, Span::new(lo, hi)));
    }
}

fn response_unit_ids(d: &DialogSample, layout: &VocabLayout) -> Result<Vec<u32>, TemplateError> {
    Ok(d.response_units.iter().map(|&u| layout.unit_to_id(u)).collect::<Result<_, _>>()?)
}

fn input_unit_ids(d: &DialogSample, layout: &VocabLayout) -> Result<Vec<u32>, TemplateError> {
    Ok(unit_ids(&d.input, Span::new(0, d.input.units.len()), layout)?)
}

/// The spoken-dialog fine-tuning template.
pub fn build_sdm_template<T: TextTokenizer>(
    d: &DialogSample,
    layout: &VocabLayout,
    tok: &T,
) -> Result<TrainingSample, TemplateError> {
    d.check()?;
    let s1 = input_unit_ids(d, layout)?;
    let t1 = text_ids(&d.input, 0..d.input.words.len(), tok);
    let t2 = tok.encode_words(&d.response_text);
    let u2 = response_unit_ids(d, layout)?;
    let corr = [layout.correspond_id()];
    let mut b = Builder::new(d.id());
    b.region(Region::Prompt, &[&[layout.bos_id()], &s1, &corr]);
    b.region(Region::Transcript, &[&t1, &[layout.sep_a_id()]]);
    b.region(Region::AnswerText, &[&t2, &corr]);
    b.region(Region::AnswerUnits, &[&u2, &[layout.eos_id()]]);
    Ok(b.sample)
}

/// Speech-to-speech template with no intermediate text.
pub fn build_s1s2_template(d: &DialogSample, layout: &VocabLayout) -> Result<TrainingSample, TemplateError> {
    d.check()?;
    let s1 = input_unit_ids(d, layout)?;
    let u2 = response_unit_ids(d, layout)?;
    let mut b = Builder::new(d.id());
    b.region(Region::Prompt, &[&[layout.bos_id()], &s1, &[layout.sep_a_id()]]);
    b.region(Region::AnswerUnits, &[&u2, &[layout.eos_id()]]);
    Ok(b.sample)
}

/// Text-only dialog variant: transcript in, response text out.
pub fn build_text_dialog_template<T: TextTokenizer>(
    d: &DialogSample,
    layout: &VocabLayout,
    tok: &T,
) -> Result<TrainingSample, TemplateError> {
    d.check()?;
    let t1 = text_ids(&d.input, 0..d.input.words.len(), tok);
    let t2 = tok.encode_words(&d.response_text);
    let mut b = Builder::new(d.id());
    b.region(Region::Prompt, &[&[layout.bos_id()], &t1, &[layout.sep_a_id()]]);
    b.region(Region::AnswerText, &[&t2, &[layout.eos_id()]]);
    Ok(b.sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Sdm,
    S1s2,
    TextDialog,
}

impl std::str::FromStr for TemplateKind {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sdm" => Ok(Self::Sdm),
            "s1s2" => Ok(Self::S1s2),
            "text" | "text_dialog" => Ok(Self::TextDialog),
            _ => Err(TemplateError::Unknown { what: "template", value: s.into() }),
        }
    }
}

pub fn build_template<T: TextTokenizer>(
    kind: TemplateKind,
    d: &DialogSample,
    layout: &VocabLayout,
    tok: &T,
) -> Result<TrainingSample, TemplateError> {
    match kind {
        TemplateKind::Sdm => build_sdm_template(d, layout, tok),
        TemplateKind::S1s2 => build_s1s2_template(d, layout),
        TemplateKind::TextDialog => build_text_dialog_template(d, layout, tok),
    }
}

/// JSON Lines form of a training sample, with the mask as an array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub regions: Vec<(Region, Span)>,
}

pub fn write_training_jsonl<'a>(
    mut w: impl Write,
    samples: impl IntoIterator<Item = &'a TrainingSample>,
) -> Result<(), TemplateError> {
    for s in samples {
        let rec = TrainingRecord {
            id: s.id.clone(),
            ids: s.ids.clone(),
            mask: s.loss_mask.clone(),
            regions: s.regions.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| TemplateError::Jsonl { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_jsonl(r: impl BufRead) -> Result<Vec<TrainingSample>, TemplateError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainingRecord =
            serde_json::from_str(&line).map_err(|e| TemplateError::Jsonl { line: i + 1, message: e.to_string() })?;
        if rec.mask.len() != rec.ids.len() {
            return Err(TemplateError::Jsonl {
                line: i + 1,
                message: format!("{} mask entries for {} ids", rec.mask.len(), rec.ids.len()),
            });
        }
        out.push(TrainingSample { id: rec.id, ids: rec.ids, loss_mask: rec.mask, regions: rec.regions });
    }
    Ok(out)
}

/// Pretraining data style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainScheme {
    /// Segment-wise interleaving with both relationship tokens.
    Unified,
    /// Segment-wise interleaving without sub-modality copies.
    Setup1,
    /// Whole-utterance unit/text correspondence.
    Setup2,
    /// Fixed `U1 <corr> T <corr> U2`.
    Setup3,
}

impl PretrainScheme {
    pub const ALL: [PretrainScheme; 4] = [Self::Unified, Self::Setup1, Self::Setup2, Self::Setup3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unified => "unified",
            Self::Setup1 => "1",
            Self::Setup2 => "2",
            Self::Setup3 => "3",
        }
    }

    /// The junction token used when evaluating a scorer trained on this
    /// scheme.
    pub fn eval_junction(self) -> Junction {
        match self {
            Self::Unified => Junction::Native,
            Self::Setup1 => Junction::Forced(Special::Continue),
            Self::Setup2 | Self::Setup3 => Junction::Forced(Special::Correspond),
        }
    }
}

impl std::str::FromStr for PretrainScheme {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unified" => Ok(Self::Unified),
            "1" | "setup1" => Ok(Self::Setup1),
            "2" | "setup2" => Ok(Self::Setup2),
            "3" | "setup3" => Ok(Self::Setup3),
            _ => Err(TemplateError::Unknown { what: "setup", value: s.into() }),
        }
    }
}

impl std::fmt::Display for PretrainScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn two_way_split(pair: &AlignedPair) -> Result<SegmentationPlan, TemplateError> {
    if pair.words.len() < 2 {
        return Err(TemplateError::DegenerateSplit { id: pair.id.clone(), words: pair.words.len() });
    }
    Ok(plan_with_count(pair, 2)?)
}

fn checked(pair: &AlignedPair) -> Result<(), TemplateError> {
    let report = validate_pair(pair);
    if !report.passed() {
        return Err(TemplateError::InvalidPair { id: pair.id.clone(), detail: format!("{:?}", report.violations) });
    }
    Ok(())
}

/// One pretraining sequence under `scheme`, drawing from `rng`.
pub fn build_setup_sequence<T: TextTokenizer>(
    pair: &AlignedPair,
    scheme: PretrainScheme,
    insert_prob: f64,
    rng: &mut impl RngCore,
    layout: &VocabLayout,
    tok: &T,
) -> Result<InterleavedSequence, TemplateError> {
    checked(pair)?;
    let mut seq = match scheme {
        PretrainScheme::Unified | PretrainScheme::Setup1 => {
            let plan = plan_segments(pair)?;
            let p = if scheme == PretrainScheme::Unified { insert_prob } else { 0.0 };
            let choices = draw_choices(&plan, rng, p)?;
            render(pair, &plan, &choices, layout, tok)?
        }
        PretrainScheme::Setup2 => {
            let plan = plan_with_count(pair, 1)?;
            let main = if coin(rng) { Modality::Unit } else { Modality::Text };
            let mut seq = InterleavedSequence::default();
            let first = segment_content(pair, &plan, 0, main, layout, tok)?;
            let second = segment_content(pair, &plan, 0, main.other(), layout, tok)?;
            let sub = Provenance { segment: 0, role: Role::Sub };
            seq.push_block(&first, main, Provenance { segment: 0, role: Role::Main });
            seq.push_special(layout, Special::Correspond, sub);
            seq.push_block(&second, main.other(), sub);
            seq
        }
        PretrainScheme::Setup3 => {
            let plan = two_way_split(pair)?;
            let u1 = segment_content(pair, &plan, 0, Modality::Unit, layout, tok)?;
            let u2 = segment_content(pair, &plan, 1, Modality::Unit, layout, tok)?;
            let t = text_ids(pair, 0..pair.words.len(), tok);
            let text_prov = Provenance { segment: 0, role: Role::Sub };
            let u2_prov = Provenance { segment: 1, role: Role::Main };
            let mut seq = InterleavedSequence::default();
            seq.push_block(&u1, Modality::Unit, Provenance { segment: 0, role: Role::Main });
            seq.push_special(layout, Special::Correspond, text_prov);
            seq.push_block(&t, Modality::Text, text_prov);
            seq.push_special(layout, Special::Correspond, u2_prov);
            seq.push_block(&u2, Modality::Unit, u2_prov);
            seq
        }
    };
    seq.id = pair.id.clone();
    Ok(seq)
}

/// [`build_setup_sequence`] with the per-sample stream of `(corpus_seed, pair.id)`.
pub fn setup_sequence_seeded<T: TextTokenizer>(
    pair: &AlignedPair,
    scheme: PretrainScheme,
    insert_prob: f64,
    corpus_seed: u64,
    layout: &VocabLayout,
    tok: &T,
) -> Result<InterleavedSequence, TemplateError> {
    let mut rng = sample_rng(corpus_seed, &pair.id);
    let mut seq = build_setup_sequence(pair, scheme, insert_prob, &mut rng, layout, tok)?;
    seq.seed = corpus_seed;
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    UncondText,
    UncondUnit,
    CorrU2t,
    CorrT2u,
    ContU2t,
    ContT2u,
}

impl EvalKind {
    pub const ALL: [EvalKind; 6] =
        [Self::UncondText, Self::UncondUnit, Self::CorrU2t, Self::CorrT2u, Self::ContU2t, Self::ContT2u];

    pub fn name(self) -> &'static str {
        match self {
            Self::UncondText => "uncond_text",
            Self::UncondUnit => "uncond_unit",
            Self::CorrU2t => "corr_u2t",
            Self::CorrT2u => "corr_t2u",
            Self::ContU2t => "cont_u2t",
            Self::ContT2u => "cont_t2u",
        }
    }

    /// Modality of the scored span.
    pub fn target_modality(self) -> Modality {
        match self {
            Self::UncondText | Self::CorrU2t | Self::ContU2t => Modality::Text,
            Self::UncondUnit | Self::CorrT2u | Self::ContT2u => Modality::Unit,
        }
    }

    /// The relationship token this kind is built around, if any.
    pub fn native_special(self) -> Option<Special> {
        match self {
            Self::UncondText | Self::UncondUnit => None,
            Self::CorrU2t | Self::CorrT2u => Some(Special::Correspond),
            Self::ContU2t | Self::ContT2u => Some(Special::Continue),
        }
    }

    /// Parses a comma-separated list; `all` selects every kind.
    pub fn parse_list(s: &str) -> Result<Vec<EvalKind>, TemplateError> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|k| k.trim().parse()).collect()
    }
}

impl std::str::FromStr for EvalKind {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TemplateError::Unknown { what: "eval kind", value: s.into() })
    }
}

impl std::fmt::Display for EvalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which relationship token joins the two halves of an eval sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Junction {
    /// The kind's own token.
    Native,
    /// Always this token.
    Forced(Special),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSequence {
    pub id: String,
    pub kind: EvalKind,
    pub ids: Vec<u32>,
    pub target: Span,
    pub target_modality: Modality,
}

/// One evaluation sequence of `kind`, joined by the kind's own token.
pub fn build_eval_sequence<T: TextTokenizer>(
    pair: &AlignedPair,
    kind: EvalKind,
    layout: &VocabLayout,
    tok: &T,
) -> Result<EvalSequence, TemplateError> {
    build_eval_sequence_with(pair, kind, Junction::Native, layout, tok)
}

/// One evaluation sequence of `kind` with an explicit junction policy.
pub fn build_eval_sequence_with<T: TextTokenizer>(
    pair: &AlignedPair,
    kind: EvalKind,
    junction: Junction,
    layout: &VocabLayout,
    tok: &T,
) -> Result<EvalSequence, TemplateError> {
    checked(pair)?;
    let all_units = || unit_ids(pair, Span::new(0, pair.units.len()), layout);
    let all_text = || text_ids(pair, 0..pair.words.len(), tok);
    let (context, target) = match kind {
        EvalKind::UncondText => (Vec::new(), all_text()),
        EvalKind::UncondUnit => (Vec::new(), all_units()?),
        EvalKind::CorrU2t => (all_units()?, all_text()),
        EvalKind::CorrT2u => (all_text(), all_units()?),
        EvalKind::ContU2t | EvalKind::ContT2u => {
            let plan = two_way_split(pair)?;
            let (first, second) = if kind == EvalKind::ContU2t {
                (Modality::Unit, Modality::Text)
            } else {
                (Modality::Text, Modality::Unit)
            };
            (
                segment_content(pair, &plan, 0, first, layout, tok)?,
                segment_content(pair, &plan, 1, second, layout, tok)?,
            )
        }
    };
    let mut ids = context;
    if let Some(native) = kind.native_special() {
        let special = match junction {
            Junction::Native => native,
            Junction::Forced(s) => s,
        };
        ids.push(layout.special_id(special));
    }
    let lo = ids.len();
    ids.extend(target);
    Ok(EvalSequence {
        id: pair.id.clone(),
        kind,
        target: Span::new(lo, ids.len()),
        target_modality: kind.target_modality(),
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Lexicon;

    fn pair(id: &str, words: &[(&str, f64, f64)], n_units: usize) -> AlignedPair {
        let words = words.iter().map(|&(w, s, e)| WordAlignment::new(w, s, e)).collect();
        let units = (0..n_units as u32).map(|i| i % 5).collect();
        AlignedPair::new(id, units, words, None).unwrap()
    }

    fn two_words() -> AlignedPair {
        pair("two", &[("hello", 0.0, 0.04), ("world", 0.04, 0.1)], 5)
    }

    fn setup() -> (VocabLayout, Lexicon) {
        let layout = VocabLayout::new(32, 8).unwrap();
        let lex = Lexicon::build(["hello", "world", "fine", "thanks", "hi", "a", "b"], &layout).unwrap();
        (layout, lex)
    }

    fn dialog() -> DialogSample {
        // 3 input units, 2 transcript words, 2 response words, 3 response units
        DialogSample {
            input: pair("d", &[("hello", 0.0, 0.02), ("world", 0.02, 0.06)], 3),
            response_text: vec!["fine".into(), "thanks".into()],
            response_units: vec![4, 5, 6],
        }
    }

    #[test]
    fn sdm_template_hand_count() {
        let (layout, lex) = setup();
        let s = build_sdm_template(&dialog(), &layout, &lex).unwrap();
        assert_eq!(s.len(), 15);
        assert_eq!(s.mask_count(), 10);
        let u = |x: u32| layout.unit_to_id(x).unwrap();
        let w = |x: &str| lex.id(x).unwrap();
        let (corr, bos, eos, sep) = (layout.correspond_id(), layout.bos_id(), layout.eos_id(), layout.sep_a_id());
        assert_eq!(
            s.ids,
            vec![
                bos,
                u(0),
                u(1),
                u(2),
                corr,
                w("hello"),
                w("world"),
                sep,
                w("fine"),
                w("thanks"),
                corr,
                u(4),
                u(5),
                u(6),
                eos
            ]
        );
        let mask: Vec<bool> = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1].iter().map(|&b| b == 1).collect();
        assert_eq!(s.loss_mask, mask);
        assert_eq!(s.loss_mask, s.expected_mask());
        assert_eq!(s.region(Region::Prompt), Some(Span::new(0, 5)));
        assert_eq!(s.region(Region::AnswerUnits), Some(Span::new(11, 15)));
    }

    #[test]
    fn regions_tile_the_sample() {
        let (layout, lex) = setup();
        for s in [
            build_sdm_template(&dialog(), &layout, &lex).unwrap(),
            build_s1s2_template(&dialog(), &layout).unwrap(),
            build_text_dialog_template(&dialog(), &layout, &lex).unwrap(),
        ] {
            let mut at = 0;
            for &(_, span) in &s.regions {
                assert_eq!(span.lo, at);
                at = span.hi;
            }
            assert_eq!(at, s.len());
            assert_eq!(s.loss_mask.len(), s.len());
        }
    }

    #[test]
    fn s1s2_template() {
        let (layout, lex) = setup();
        let d = dialog();
        let s = build_s1s2_template(&d, &layout).unwrap();
        assert_eq!(s.mask_count(), d.response_units.len() + 1);
        assert!(s.ids.iter().all(|&id| layout.modality_of(id).unwrap() != Modality::Text
            || [layout.bos_id(), layout.eos_id(), layout.sep_a_id()].contains(&id)));
        assert!(s.len() < build_sdm_template(&d, &layout, &lex).unwrap().len());
    }

    #[test]
    fn text_dialog_template() {
        let (layout, lex) = setup();
        let s = build_text_dialog_template(&dialog(), &layout, &lex).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s.mask_count(), 3);
    }

    #[test]
    fn empty_responses_rejected() {
        let (layout, lex) = setup();
        let mut d = dialog();
        d.response_text.clear();
        assert!(matches!(build_sdm_template(&d, &layout, &lex), Err(TemplateError::EmptyResponseText(_))));
        let mut d = dialog();
        d.response_units.clear();
        assert!(matches!(build_s1s2_template(&d, &layout), Err(TemplateError::EmptyResponseUnits(_))));
    }

    #[test]
    fn dialog_jsonl_roundtrip() {
        let d = dialog();
        let mut buf = Vec::new();
        write_dialogs_jsonl(&mut buf, [&d]).unwrap();
        assert_eq!(read_dialogs_jsonl(&buf[..]).unwrap(), vec![d]);
    }

    #[test]
    fn training_jsonl_roundtrip() {
        let (layout, lex) = setup();
        let s = build_sdm_template(&dialog(), &layout, &lex).unwrap();
        let mut buf = Vec::new();
        write_training_jsonl(&mut buf, [&s]).unwrap();
        assert_eq!(read_training_jsonl(&buf[..]).unwrap(), vec![s]);
    }

    fn long_pair() -> AlignedPair {
        let words: Vec<(String, f64, f64)> =
            (0..24).map(|i| (if i % 2 == 0 { "a" } else { "b" }.to_string(), i as f64, i as f64 + 1.0)).collect();
        let w: Vec<(&str, f64, f64)> = words.iter().map(|(s, a, b)| (s.as_str(), *a, *b)).collect();
        pair("long", &w, 24 * 50)
    }

    #[test]
    fn setup_sequences() {
        let (layout, lex) = setup();
        let p = long_pair();
        for seed in 0..20 {
            let s1 = setup_sequence_seeded(&p, PretrainScheme::Setup1, 0.5, seed, &layout, &lex).unwrap();
            assert_eq!(s1.count_id(layout.correspond_id()), 0);
            let s2 = setup_sequence_seeded(&p, PretrainScheme::Setup2, 0.5, seed, &layout, &lex).unwrap();
            assert_eq!(s2.count_id(layout.correspond_id()), 1);
            assert_eq!(s2.count_id(layout.continue_id()), 0);
            assert_eq!(s2.len(), p.units.len() + p.words.len() + 1);
        }
    }

    #[test]
    fn setup1_matches_unified_mains() {
        // same stream, same main modalities; only the copies differ
        let (layout, lex) = setup();
        let p = long_pair();
        let s1 = setup_sequence_seeded(&p, PretrainScheme::Setup1, 0.5, 9, &layout, &lex).unwrap();
        let un = setup_sequence_seeded(&p, PretrainScheme::Unified, 0.5, 9, &layout, &lex).unwrap();
        let mains = |s: &InterleavedSequence| -> Vec<u32> {
            s.ids.iter().zip(&s.provenance).filter(|(_, p)| p.role == Role::Main).map(|(&i, _)| i).collect()
        };
        let strip = |v: Vec<u32>| -> Vec<u32> { v.into_iter().filter(|&i| i != layout.continue_id()).collect() };
        assert_eq!(strip(mains(&s1)), strip(mains(&un)));
    }

    #[test]
    fn setup3_two_words() {
        let (layout, lex) = setup();
        let p = two_words();
        let mut rng = sample_rng(0, "x");
        let s = build_setup_sequence(&p, PretrainScheme::Setup3, 0.5, &mut rng, &layout, &lex).unwrap();
        let u = |x: u32| layout.unit_to_id(x).unwrap();
        let corr = layout.correspond_id();
        // frames: hello -> [0, 2), world -> [2, 5)
        assert_eq!(
            s.ids,
            vec![u(0), u(1), corr, lex.id("hello").unwrap(), lex.id("world").unwrap(), corr, u(2), u(3), u(4)]
        );
        let one = pair("one", &[("hi", 0.0, 0.1)], 5);
        assert!(matches!(
            build_setup_sequence(&one, PretrainScheme::Setup3, 0.5, &mut rng, &layout, &lex),
            Err(TemplateError::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn eval_sequences() {
        let (layout, lex) = setup();
        let p = two_words();
        let u = |x: u32| layout.unit_to_id(x).unwrap();
        let (h, w) = (lex.id("hello").unwrap(), lex.id("world").unwrap());

        let e = build_eval_sequence(&p, EvalKind::CorrU2t, &layout, &lex).unwrap();
        assert_eq!(e.ids, vec![u(0), u(1), u(2), u(3), u(4), layout.correspond_id(), h, w]);
        assert_eq!(e.target, Span::new(6, 8));

        let e = build_eval_sequence(&p, EvalKind::ContT2u, &layout, &lex).unwrap();
        assert_eq!(e.ids, vec![h, layout.continue_id(), u(2), u(3), u(4)]);
        assert_eq!((e.target, e.target_modality), (Span::new(2, 5), Modality::Unit));

        let e = build_eval_sequence(&p, EvalKind::UncondText, &layout, &lex).unwrap();
        assert_eq!((e.ids.clone(), e.target), (vec![h, w], Span::new(0, 2)));

        let e = build_eval_sequence_with(&p, EvalKind::ContU2t, Junction::Forced(Special::Correspond), &layout, &lex)
            .unwrap();
        assert_eq!(e.ids, vec![u(0), u(1), layout.correspond_id(), w]);

        for kind in EvalKind::ALL {
            let e = build_eval_sequence(&p, kind, &layout, &lex).unwrap();
            assert!(e.ids[e.target.range()].iter().all(|&id| layout.modality_of(id).unwrap() == e.target_modality));
        }

        let one = pair("one", &[("hi", 0.0, 0.1)], 5);
        assert!(build_eval_sequence(&one, EvalKind::ContU2t, &layout, &lex).is_err());
        assert!(build_eval_sequence(&one, EvalKind::CorrT2u, &layout, &lex).is_ok());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(EvalKind::parse_list("all").unwrap().len(), 6);
        assert_eq!(EvalKind::parse_list("corr_u2t, cont_t2u").unwrap(), vec![EvalKind::CorrU2t, EvalKind::ContT2u]);
        assert!(EvalKind::parse_list("corr").is_err());
        assert_eq!("3".parse::<PretrainScheme>().unwrap(), PretrainScheme::Setup3);
    }
}
