//! Perplexity evaluation over the six evaluation sequence kinds.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::metrics::ppl_aggregate;
use super::{NGramScorer, ScoringError};
use crate::alignment::AlignedPair;
use crate::templates::{build_eval_sequence_with, EvalKind, Junction, TemplateError};
use crate::tokenizer::TextTokenizer;

/// Kinds whose target is text; their perplexities form the text average.
pub const TEXT_KINDS: [EvalKind; 3] = [EvalKind::UncondText, EvalKind::CorrU2t, EvalKind::ContU2t];
/// Kinds whose target is units.
pub const UNIT_KINDS: [EvalKind; 3] = [EvalKind::UncondUnit, EvalKind::CorrT2u, EvalKind::ContT2u];

#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub kind: EvalKind,
    pub sequences: usize,
    /// Pairs too short to split for this kind.
    pub skipped: usize,
    pub tokens: usize,
    /// Geometric mean of per-sequence perplexities.
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kinds: Vec<KindReport>,
    pub text_ppl: Option<f64>,
    pub unit_ppl: Option<f64>,
}

impl EvalReport {
    pub fn get(&self, kind: EvalKind) -> Option<&KindReport> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    pub fn ppl(&self, kind: EvalKind) -> Option<f64> {
        self.get(kind).map(|k| k.ppl)
    }

    /// One `key=value` record per kind, then one per modality average.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.kinds {
            writeln!(
                out,
                "kind={} sequences={} skipped={} tokens={} ppl={:.6}",
                k.kind, k.sequences, k.skipped, k.tokens, k.ppl
            )
            .expect("string write");
        }
        for (name, v) in [("text", self.text_ppl), ("unit", self.unit_ppl)] {
            if let Some(p) = v {
                writeln!(out, "aggregate={name} ppl={p:.6}").expect("string write");
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,sequences,skipped,tokens,ppl\n");
        for k in &self.kinds {
            writeln!(out, "{},{},{},{},{:.6}", k.kind, k.sequences, k.skipped, k.tokens, k.ppl).expect("string write");
        }
        for (name, v) in [("aggregate_text", self.text_ppl), ("aggregate_unit", self.unit_ppl)] {
            if let Some(p) = v {
                writeln!(out, "{name},,,,{p:.6}").expect("string write");
            }
        }
        out
    }
}

/// Mean restricted NLL of one kind's target span for one pair, or `None`
/// when the pair cannot be split.
fn sequence_nll<T: TextTokenizer>(
    scorer: &NGramScorer,
    pair: &AlignedPair,
    kind: EvalKind,
    junction: Junction,
    tok: &T,
) -> Result<Option<(f64, usize)>, ScoringError> {
    let seq = match build_eval_sequence_with(pair, kind, junction, scorer.layout(), tok) {
        Ok(s) => s,
        Err(TemplateError::DegenerateSplit { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let nll = scorer.restricted_nll(&seq.ids, seq.target, seq.target_modality)?;
    if nll.is_empty() {
        return Ok(None);
    }
    Ok(Some((nll.iter().sum::<f64>() / nll.len() as f64, nll.len())))
}

/// Evaluates `scorer` on every pair for each kind. Sequences are scored in
/// parallel; results do not depend on the thread count.
pub fn evaluate<T: TextTokenizer>(
    scorer: &NGramScorer,
    pairs: &[AlignedPair],
    kinds: &[EvalKind],
    junction: Junction,
    tok: &T,
) -> Result<EvalReport, ScoringError> {
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let per_seq: Vec<Option<(f64, usize)>> =
            pairs.par_iter().map(|p| sequence_nll(scorer, p, kind, junction, tok)).collect::<Result<_, _>>()?;
        let scored: Vec<(f64, usize)> = per_seq.iter().flatten().copied().collect();
        if scored.is_empty() {
            return Err(ScoringError::Domain(format!("no evaluable sequences for {kind}")));
        }
        let mean_log_ppl = scored.iter().map(|(m, _)| m).sum::<f64>() / scored.len() as f64;
        reports.push(KindReport {
            kind,
            sequences: scored.len(),
            skipped: per_seq.len() - scored.len(),
            tokens: scored.iter().map(|(_, n)| n).sum(),
            ppl: mean_log_ppl.exp(),
        });
    }
    let aggregate = |group: &[EvalKind]| -> Result<Option<f64>, ScoringError> {
        let ppls: Vec<f64> = reports.iter().filter(|r| group.contains(&r.kind)).map(|r| r.ppl).collect();
        if ppls.is_empty() {
            Ok(None)
        } else {
            ppl_aggregate(&ppls).map(Some)
        }
    };
    Ok(EvalReport { text_ppl: aggregate(&TEXT_KINDS)?, unit_ppl: aggregate(&UNIT_KINDS)?, kinds: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::WordAlignment;
    use crate::tokenizer::Lexicon;
    use crate::vocab::VocabLayout;

    fn pairs() -> Vec<AlignedPair> {
        (0..4)
            .map(|i| {
                let words = vec![WordAlignment::new("a", 0.0, 0.1), WordAlignment::new("b", 0.1, 0.2)];
                AlignedPair::new(format!("p{i}"), vec![i, 1, 2, 3, 4, 5, 6, 7, 8, 9], words, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_scorer_report() {
        let layout = VocabLayout::new(100, 10_000).unwrap();
        let lex = Lexicon::build(["a", "b"], &layout).unwrap();
        let s = NGramScorer::new(&layout, 3, 1.0).unwrap();
        let r = evaluate(&s, &pairs(), &EvalKind::ALL, Junction::Native, &lex).unwrap();
        assert_eq!(r.kinds.len(), 6);
        for k in &r.kinds {
            let want = if TEXT_KINDS.contains(&k.kind) { 100.0 } else { 10_000.0 };
            assert!((k.ppl - want).abs() < 1e-6 * want, "{:?}", k);
            assert_eq!(k.sequences, 4);
        }
        assert!((r.text_ppl.unwrap() - 100.0).abs() < 1e-6);
        assert!((r.unit_ppl.unwrap() - 10_000.0).abs() < 1e-3);
        assert_eq!(r.to_text().lines().count(), 8);
        assert_eq!(r.to_csv().lines().count(), 9);
    }

    #[test]
    fn per_kind_ppl_is_geometric_mean_over_sequences() {
        let layout = VocabLayout::new(16, 16).unwrap();
        let lex = Lexicon::build(["a", "b"], &layout).unwrap();
        let ps = pairs();
        let docs: Vec<Vec<u32>> =
            ps[..1].iter().map(|p| p.units.iter().map(|&u| layout.unit_to_id(u).unwrap()).collect()).collect();
        let s = NGramScorer::train(&layout, 2, 0.5, docs.iter().map(Vec::as_slice)).unwrap();
        let r = evaluate(&s, &ps, &[EvalKind::UncondUnit], Junction::Native, &lex).unwrap();
        let per_seq: Vec<f64> = ps
            .iter()
            .map(|p| {
                let e = crate::templates::build_eval_sequence(p, EvalKind::UncondUnit, &layout, &lex).unwrap();
                let nll = s.restricted_nll(&e.ids, e.target, e.target_modality).unwrap();
                (nll.iter().sum::<f64>() / nll.len() as f64).exp()
            })
            .collect();
        assert!((r.kinds[0].ppl - ppl_aggregate(&per_seq).unwrap()).abs() < 1e-9);
    }
}
