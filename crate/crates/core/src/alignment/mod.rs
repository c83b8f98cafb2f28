//! Word-level alignments and their conversion to unit-index spans.

mod textgrid;

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::span::Span;

pub use textgrid::parse_textgrid;

/// Unit frames per second.
pub const FRAME_RATE_HZ: f64 = 50.0;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("TextGrid line {line}: {message}")]
    TextGrid { line: usize, message: String },
    #[error("no interval tier named {0:?}")]
    MissingTier(String),
    #[error("word {index} ({word:?}): {message}")]
    BadWord { index: usize, word: String, message: String },
    #[error("cannot align an utterance with no words")]
    NoWords,
    #[error("{n_units} unit frames cannot give each of {n_words} words a non-empty span")]
    TooFewUnits { n_units: usize, n_words: usize },
    #[error("frame rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error("no unit sequence for utterance {0:?}")]
    MissingUnits(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One word and its time interval in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    #[serde(rename = "w")]
    pub word: String,
    pub start: f64,
    pub end: f64,
}

impl WordAlignment {
    pub fn new(word: impl Into<String>, start: f64, end: f64) -> Self {
        Self { word: word.into(), start, end }
    }
}

/// Checks the per-word invariants: `0 <= start < end`, time-ordered and
/// non-overlapping.
pub fn check_word_order(words: &[WordAlignment]) -> Result<(), AlignmentError> {
    let mut prev_end = 0.0f64;
    for (index, w) in words.iter().enumerate() {
        let bad = |message: String| AlignmentError::BadWord { index, word: w.word.clone(), message };
        if !(w.start.is_finite() && w.end.is_finite()) {
            return Err(bad("non-finite time".into()));
        }
        if w.start < 0.0 {
            return Err(bad(format!("negative start {}", w.start)));
        }
        if w.start >= w.end {
            return Err(bad(format!("start {} is not before end {}", w.start, w.end)));
        }
        if index > 0 && w.start + TIME_EPS < prev_end {
            return Err(bad(format!("starts at {} before previous word ends at {}", w.start, prev_end)));
        }
        prev_end = w.end;
    }
    Ok(())
}

/// Rounds half up, the fixed time-to-frame convention.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Converts word intervals into a partition of `[0, n_units)`, one non-empty
/// half-open span per word.
///
/// Word `i > 0` begins at frame `round(start_i * rate_hz)`, forced to be
/// strictly after the previous boundary and early enough to leave one frame
/// for every remaining word. Word 0 begins at frame 0 (leading silence joins
/// the first word), each span runs until the next boundary (gaps join the
/// preceding word), and the last span ends at `n_units`.
pub fn to_unit_spans(words: &[WordAlignment], n_units: usize, rate_hz: f64) -> Result<Vec<Span>, AlignmentError> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(AlignmentError::BadRate(rate_hz));
    }
    if words.is_empty() {
        return Err(AlignmentError::NoWords);
    }
    check_word_order(words)?;
    let n_words = words.len();
    if n_units < n_words {
        return Err(AlignmentError::TooFewUnits { n_units, n_words });
    }
    let mut bounds = Vec::with_capacity(n_words + 1);
    bounds.push(0usize);
    for (i, w) in words.iter().enumerate().skip(1) {
        let raw = round_half_up(w.start * rate_hz);
        let floor = bounds[i - 1] + 1;
        let ceil = n_units - (n_words - i);
        bounds.push(raw.max(floor).min(ceil));
    }
    bounds.push(n_units);
    Ok(bounds.windows(2).map(|b| Span::new(b[0], b[1])).collect())
}

/// A unit sequence paired with its word alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub id: String,
    pub units: Vec<u32>,
    pub words: Vec<WordAlignment>,
    pub unit_spans: Vec<Span>,
    pub duration_sec: f64,
}

impl AlignedPair {
    /// Builds a pair at 50 Hz. Without an explicit duration the unit count
    /// defines it.
    pub fn new(
        id: impl Into<String>,
        units: Vec<u32>,
        words: Vec<WordAlignment>,
        duration_sec: Option<f64>,
    ) -> Result<Self, AlignmentError> {
        let unit_spans = to_unit_spans(&words, units.len(), FRAME_RATE_HZ)?;
        let duration_sec = duration_sec.unwrap_or(units.len() as f64 / FRAME_RATE_HZ);
        Ok(Self { id: id.into(), units, words, unit_spans, duration_sec })
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    /// Unit frames covered by words `[first, last)`.
    pub fn unit_range(&self, first: usize, last: usize) -> Span {
        Span::new(self.unit_spans[first].lo, self.unit_spans[last - 1].hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    fn push(&mut self, code: &'static str, detail: String) {
        self.violations.push(Violation { code, detail });
    }
}

/// Checks every [`AlignedPair`] invariant and reports all failures.
pub fn validate_pair(pair: &AlignedPair) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = pair.units.len();

    if pair.words.is_empty() {
        report.push("no_words", "utterance has no words".into());
    }
    if let Err(e) = check_word_order(&pair.words) {
        report.push("word_order", e.to_string());
    }
    if pair.unit_spans.len() != pair.words.len() {
        report.push("span_count", format!("{} spans for {} words", pair.unit_spans.len(), pair.words.len()));
    }
    for (i, s) in pair.unit_spans.iter().enumerate() {
        if s.is_empty() {
            report.push("empty_span", format!("span {i} = [{}, {}) is empty", s.lo, s.hi));
        }
        if s.hi > n {
            report.push("span_out_of_range", format!("span {i} ends at {} > {n} units", s.hi));
        }
    }
    for (i, w) in pair.unit_spans.windows(2).enumerate() {
        if w[1].lo < w[0].hi {
            report.push(
                "span_overlap",
                format!("span {} starts at {} before span {i} ends at {}", i + 1, w[1].lo, w[0].hi),
            );
        } else if w[1].lo > w[0].hi {
            report.push("span_gap", format!("frames [{}, {}) belong to no span", w[0].hi, w[1].lo));
        }
    }
    if let (Some(first), Some(last)) = (pair.unit_spans.first(), pair.unit_spans.last()) {
        if first.lo != 0 || last.hi != n {
            report.push("coverage", format!("spans cover [{}, {}) but there are {n} units", first.lo, last.hi));
        }
    }
    let implied = n as f64 / FRAME_RATE_HZ;
    let drift = (pair.duration_sec - implied).abs();
    if drift.is_nan() || drift > 1.0 / FRAME_RATE_HZ + TIME_EPS {
        report
            .push("duration_mismatch", format!("duration {} s vs {implied} s implied by {n} units", pair.duration_sec));
    }
    report
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordsRecord {
    pub id: String,
    pub words: Vec<WordAlignment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitsRecord {
    pub id: String,
    pub units: Vec<u32>,
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, AlignmentError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| AlignmentError::Jsonl { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Word alignments in the JSON Lines exchange format. Every record is
/// checked against the word invariants.
pub fn read_words_jsonl(reader: impl BufRead) -> Result<Vec<WordsRecord>, AlignmentError> {
    let records: Vec<WordsRecord> = read_jsonl(reader)?;
    for r in &records {
        check_word_order(&r.words)?;
    }
    Ok(records)
}

pub fn read_units_jsonl(reader: impl BufRead) -> Result<Vec<UnitsRecord>, AlignmentError> {
    read_jsonl(reader)
}

/// Joins word and unit records by id, in word-record order. Unit records
/// without words are ignored.
pub fn join_records(words: Vec<WordsRecord>, units: Vec<UnitsRecord>) -> Result<Vec<AlignedPair>, AlignmentError> {
    let mut by_id: std::collections::HashMap<String, Vec<u32>> = units.into_iter().map(|u| (u.id, u.units)).collect();
    words
        .into_iter()
        .map(|w| {
            let units = by_id.remove(&w.id).ok_or_else(|| AlignmentError::MissingUnits(w.id.clone()))?;
            AlignedPair::new(w.id, units, w.words, None)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(word: &str, start: f64, end: f64) -> WordAlignment {
        WordAlignment::new(word, start, end)
    }

    #[test]
    fn join_matches_by_id_and_reports_missing_units() {
        let words = vec![
            WordsRecord { id: "b".into(), words: vec![w("x", 0.0, 0.1)] },
            WordsRecord { id: "a".into(), words: vec![w("y", 0.0, 0.1)] },
        ];
        let units =
            vec![UnitsRecord { id: "a".into(), units: vec![1; 5] }, UnitsRecord { id: "b".into(), units: vec![2; 5] }];
        let pairs = join_records(words.clone(), units).unwrap();
        assert_eq!(pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(pairs[0].units, vec![2; 5]);
        let err = join_records(words, vec![UnitsRecord { id: "a".into(), units: vec![1; 5] }]).unwrap_err();
        assert!(matches!(err, AlignmentError::MissingUnits(id) if id == "b"));
    }

    #[test]
    fn single_word_takes_everything() {
        let spans = to_unit_spans(&[w("hi", 0.48, 0.90)], 45, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans, vec![Span::new(0, 45)]);
    }

    #[test]
    fn two_adjacent_words() {
        let spans = to_unit_spans(&[w("a", 0.0, 0.5), w("b", 0.5, 1.0)], 50, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans, vec![Span::new(0, 25), Span::new(25, 50)]);
    }

    #[test]
    fn gap_frames_join_preceding_word() {
        // boundary for the second word: round(0.9 * 50) = 45
        let spans = to_unit_spans(&[w("a", 0.0, 0.2), w("b", 0.9, 1.0)], 50, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans, vec![Span::new(0, 45), Span::new(45, 50)]);
    }

    #[test]
    fn round_half_up_convention() {
        // 0.51 * 50 = 25.5 -> 26
        let spans = to_unit_spans(&[w("a", 0.0, 0.51), w("b", 0.51, 1.0)], 50, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans[1].lo, 26);
    }

    #[test]
    fn crowded_boundaries_are_pushed_apart() {
        let words = [w("a", 0.0, 0.001), w("b", 0.001, 0.002), w("c", 0.002, 0.003)];
        let spans = to_unit_spans(&words, 3, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans, vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)]);
    }

    #[test]
    fn late_words_are_clamped_into_range() {
        let words = [w("a", 0.0, 1.0), w("b", 5.0, 6.0), w("c", 7.0, 8.0)];
        let spans = to_unit_spans(&words, 10, FRAME_RATE_HZ).unwrap();
        assert_eq!(spans, vec![Span::new(0, 8), Span::new(8, 9), Span::new(9, 10)]);
    }

    #[test]
    fn too_few_units() {
        let words = [w("a", 0.0, 0.1), w("b", 0.1, 0.2)];
        assert!(matches!(
            to_unit_spans(&words, 1, FRAME_RATE_HZ),
            Err(AlignmentError::TooFewUnits { n_units: 1, n_words: 2 })
        ));
    }

    #[test]
    fn unordered_words_rejected() {
        let words = [w("a", 0.5, 0.6), w("b", 0.1, 0.2)];
        assert!(matches!(to_unit_spans(&words, 50, FRAME_RATE_HZ), Err(AlignmentError::BadWord { .. })));
    }

    fn good_pair() -> AlignedPair {
        AlignedPair::new("u", vec![1; 50], vec![w("a", 0.0, 0.5), w("b", 0.5, 1.0)], Some(1.0)).unwrap()
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate_pair(&good_pair()).passed());
    }

    #[test]
    fn validate_overlap() {
        let mut p = good_pair();
        p.unit_spans[1].lo = 20;
        let r = validate_pair(&p);
        assert!(r.has("span_overlap"), "{r:?}");
    }

    #[test]
    fn validate_empty_span() {
        let mut p = good_pair();
        p.unit_spans[0] = Span::new(0, 0);
        p.unit_spans[1] = Span::new(0, 50);
        assert!(validate_pair(&p).has("empty_span"));
    }

    #[test]
    fn validate_duration() {
        let mut p = good_pair();
        p.duration_sec = 1.05;
        assert!(validate_pair(&p).has("duration_mismatch"));
        p.duration_sec = 1.019;
        assert!(validate_pair(&p).passed());
    }

    #[test]
    fn jsonl_formats() {
        let words = "{\"id\":\"a\",\"words\":[{\"w\":\"hi\",\"start\":0.0,\"end\":0.4}]}\n\n";
        let recs = read_words_jsonl(words.as_bytes()).unwrap();
        assert_eq!(recs[0].words[0], w("hi", 0.0, 0.4));
        let units = "{\"id\":\"a\",\"units\":[3,3,4]}\n";
        assert_eq!(read_units_jsonl(units.as_bytes()).unwrap()[0].units, vec![3, 3, 4]);
        let bad = "{\"id\":\"a\",\"words\":[{\"w\":\"hi\",\"start\":0.5,\"end\":0.4}]}\n";
        assert!(read_words_jsonl(bad.as_bytes()).is_err());
        assert!(matches!(read_units_jsonl("{nope}\n".as_bytes()), Err(AlignmentError::Jsonl { line: 1, .. })));
    }

    fn word_lists() -> impl Strategy<Value = (Vec<WordAlignment>, usize)> {
        (1usize..30, prop::collection::vec((0u32..40, 1u32..60), 1..25)).prop_map(|(tail, gaps_durs)| {
            let mut t = 0u32;
            let mut words = Vec::new();
            for (i, (gap, dur)) in gaps_durs.into_iter().enumerate() {
                let start = t + gap;
                let end = start + dur;
                words.push(w(&format!("w{i}"), start as f64 * 0.013, end as f64 * 0.013));
                t = end;
            }
            let n_units = ((t as f64 * 0.013) * FRAME_RATE_HZ).ceil() as usize + tail;
            let n_units = n_units.max(words.len());
            (words, n_units)
        })
    }

    proptest! {
        #[test]
        fn spans_partition_units((words, n) in word_lists()) {
            let spans = to_unit_spans(&words, n, FRAME_RATE_HZ).unwrap();
            prop_assert_eq!(spans.len(), words.len());
            prop_assert_eq!(spans[0].lo, 0);
            prop_assert_eq!(spans.last().unwrap().hi, n);
            for s in &spans {
                prop_assert!(s.lo < s.hi);
            }
            for p in spans.windows(2) {
                prop_assert_eq!(p[0].hi, p[1].lo);
            }
            prop_assert_eq!(to_unit_spans(&words, n, FRAME_RATE_HZ).unwrap(), spans);
        }
    }
}
