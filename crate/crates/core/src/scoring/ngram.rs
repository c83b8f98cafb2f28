//! Count-based n-gram scorer with add-k smoothing and longest-context
//! backoff.
//!
//! For a context `h` the scorer uses the longest suffix of `h` (at most
//! `order - 1` tokens) that was seen before a counted target, and predicts
//! `p(x | h) = (c(h, x) + k) / (c(h) + k |V|)`. Restricting to a modality `M`
//! renormalizes the same distribution over `M`'s ids:
//! `(c(h, x) + k) / (c_M(h) + k |M|)`.

use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::ScoringError;
use crate::packer::Corpus;
use crate::span::Span;
use crate::vocab::{format_hash, Modality, VocabLayout};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ContextStats {
    total: u64,
    by_modality: [u64; 3],
}

#[derive(Debug, Clone)]
pub struct NGramScorer {
    layout: VocabLayout,
    order: usize,
    add_k: f64,
    /// Keyed by context followed by target.
    counts: FxHashMap<Box<[u32]>, u64>,
    contexts: FxHashMap<Box<[u32]>, ContextStats>,
    modality: Vec<u8>,
}

fn bump<'m, V: Default>(map: &'m mut FxHashMap<Box<[u32]>, V>, key: &[u32]) -> &'m mut V {
    if !map.contains_key(key) {
        map.insert(key.into(), V::default());
    }
    map.get_mut(key).expect("just inserted")
}

impl NGramScorer {
    /// An untrained scorer; every prediction is uniform over the vocabulary.
    pub fn new(layout: &VocabLayout, order: usize, add_k: f64) -> Result<Self, ScoringError> {
        if order == 0 {
            return Err(ScoringError::Domain("n-gram order must be at least 1".into()));
        }
        if !(add_k > 0.0 && add_k.is_finite()) {
            return Err(ScoringError::Domain(format!("add-k must be positive, got {add_k}")));
        }
        let modality = (0..layout.vocab_size()).map(|id| layout.modality_of(id).expect("in range").tag()).collect();
        Ok(Self {
            layout: *layout,
            order,
            add_k,
            counts: FxHashMap::default(),
            contexts: FxHashMap::default(),
            modality,
        })
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Number of distinct stored n-grams of every order.
    pub fn n_entries(&self) -> usize {
        self.counts.len()
    }

    /// Targets counted under the empty context, i.e. training tokens.
    pub fn n_tokens(&self) -> u64 {
        self.contexts.get(&[][..]).map_or(0, |s| s.total)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ScoringError> {
        let v = self.layout.vocab_size();
        match ids.iter().find(|&&id| id >= v) {
            Some(&id) => Err(ScoringError::OutOfVocab { id, vocab_size: v }),
            None => Ok(()),
        }
    }

    /// Counts one document. Targets whose mask entry is false are skipped but
    /// still serve as context.
    pub fn add_document(&mut self, ids: &[u32], mask: Option<&[bool]>) -> Result<(), ScoringError> {
        self.check_ids(ids)?;
        if let Some(m) = mask {
            if m.len() != ids.len() {
                return Err(ScoringError::Domain(format!("{} mask entries for {} ids", m.len(), ids.len())));
            }
        }
        for t in 0..ids.len() {
            if mask.is_some_and(|m| !m[t]) {
                continue;
            }
            let tag = self.modality[ids[t] as usize] as usize;
            for j in 0..=t.min(self.order - 1) {
                *bump(&mut self.counts, &ids[t - j..=t]) += 1;
                let stats = bump(&mut self.contexts, &ids[t - j..t]);
                stats.total += 1;
                stats.by_modality[tag] += 1;
            }
        }
        Ok(())
    }

    /// Trains on fully-trained sequences.
    pub fn train<'a>(
        layout: &VocabLayout,
        order: usize,
        add_k: f64,
        docs: impl IntoIterator<Item = &'a [u32]>,
    ) -> Result<Self, ScoringError> {
        let mut s = Self::new(layout, order, add_k)?;
        for d in docs {
            s.add_document(d, None)?;
        }
        Ok(s)
    }

    /// Trains on a packed corpus, honoring document boundaries and loss
    /// masks.
    pub fn train_corpus(corpus: &Corpus, layout: &VocabLayout, order: usize, add_k: f64) -> Result<Self, ScoringError> {
        corpus.check_layout(layout).map_err(|e| ScoringError::Layout(e.to_string()))?;
        let mut s = Self::new(layout, order, add_k)?;
        for bin in &corpus.bins {
            for r in bin.doc_ranges() {
                s.add_document(&bin.ids[r.clone()], Some(&bin.loss_mask[r]))?;
            }
        }
        Ok(s)
    }

    /// Adds `other`'s counts into `self`.
    pub fn merge(&mut self, other: &NGramScorer) -> Result<(), ScoringError> {
        if self.layout != other.layout || self.order != other.order || self.add_k != other.add_k {
            return Err(ScoringError::Layout(format!(
                "cannot merge scorer ({}, n={}, k={}) into ({}, n={}, k={})",
                format_hash(other.layout.hash()),
                other.order,
                other.add_k,
                format_hash(self.layout.hash()),
                self.order,
                self.add_k
            )));
        }
        for (k, &c) in &other.counts {
            *bump(&mut self.counts, k) += c;
        }
        for (k, s) in &other.contexts {
            let t = bump(&mut self.contexts, k);
            t.total += s.total;
            for m in 0..3 {
                t.by_modality[m] += s.by_modality[m];
            }
        }
        Ok(())
    }

    /// The longest usable suffix of `context` and its statistics.
    fn backoff<'c>(&self, context: &'c [u32]) -> (&'c [u32], ContextStats) {
        let max = context.len().min(self.order - 1);
        for j in (0..=max).rev() {
            let h = &context[context.len() - j..];
            if let Some(s) = self.contexts.get(h) {
                if s.total > 0 {
                    return (h, *s);
                }
            }
        }
        (&[], ContextStats::default())
    }

    fn count(&self, h: &[u32], x: u32, key: &mut Vec<u32>) -> u64 {
        key.clear();
        key.extend_from_slice(h);
        key.push(x);
        self.counts.get(key.as_slice()).copied().unwrap_or(0)
    }

    /// `p(x | context)` over the full vocabulary.
    pub fn prob(&self, context: &[u32], x: u32) -> f64 {
        let (h, s) = self.backoff(context);
        let c = self.count(h, x, &mut Vec::with_capacity(h.len() + 1));
        let v = self.layout.vocab_size() as f64;
        (c as f64 + self.add_k) / (s.total as f64 + self.add_k * v)
    }

    /// `p(x | context)` renormalized over the ids of `modality`.
    pub fn restricted_prob(&self, context: &[u32], x: u32, modality: Modality) -> f64 {
        let (h, s) = self.backoff(context);
        let c = self.count(h, x, &mut Vec::with_capacity(h.len() + 1));
        let m = self.layout.modality_size(modality) as f64;
        (c as f64 + self.add_k) / (s.by_modality[modality.tag() as usize] as f64 + self.add_k * m)
    }

    /// Full next-token distribution after `context`.
    pub fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let (h, s) = self.backoff(context);
        let denom = s.total as f64 + self.add_k * self.layout.vocab_size() as f64;
        let mut key = Vec::with_capacity(h.len() + 1);
        (0..self.layout.vocab_size()).map(|x| (self.count(h, x, &mut key) as f64 + self.add_k) / denom).collect()
    }

    /// Negative log-likelihood (nats) of `ids[t]` given `ids[..t]` for
    /// every trained position.
    pub fn sequence_nll(&self, ids: &[u32], mask: Option<&[bool]>) -> Result<(f64, usize), ScoringError> {
        self.check_ids(ids)?;
        if mask.is_some_and(|m| m.len() != ids.len()) {
            return Err(ScoringError::Domain("mask and ids differ in length".into()));
        }
        let mut nll = 0.0;
        let mut n = 0;
        for t in 0..ids.len() {
            if mask.is_some_and(|m| !m[t]) {
                continue;
            }
            nll -= self.prob(&ids[..t], ids[t]).ln();
            n += 1;
        }
        Ok((nll, n))
    }

    /// Per-token NLL (nats) over `target`, each conditional renormalized over
    /// `modality`.
    pub fn restricted_nll(&self, ids: &[u32], target: Span, modality: Modality) -> Result<Vec<f64>, ScoringError> {
        self.check_ids(ids)?;
        if target.hi > ids.len() || target.lo > target.hi {
            return Err(ScoringError::Domain(format!("target {target:?} outside {} ids", ids.len())));
        }
        target
            .range()
            .map(|t| {
                let tag = self.modality[ids[t] as usize];
                if tag != modality.tag() {
                    return Err(ScoringError::Domain(format!("token {t} (id {}) is not {modality}", ids[t])));
                }
                Ok(-self.restricted_prob(&ids[..t], ids[t], modality).ln())
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut ngrams: Vec<Vec<u64>> =
            self.counts.iter().map(|(k, &c)| k.iter().map(|&x| u64::from(x)).chain([c]).collect()).collect();
        ngrams.sort_unstable();
        let file = ScorerFile {
            layout: serde_json::from_str(&self.layout.to_json()).expect("layout json"),
            layout_hash: format_hash(self.layout.hash()),
            order: self.order,
            add_k: self.add_k,
            ngrams,
        };
        serde_json::to_string(&file).expect("scorer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ScoringError> {
        let file: ScorerFile = serde_json::from_str(s).map_err(|e| ScoringError::Malformed(e.to_string()))?;
        let layout =
            VocabLayout::from_json(&file.layout.to_string()).map_err(|e| ScoringError::Malformed(e.to_string()))?;
        if format_hash(layout.hash()) != file.layout_hash {
            return Err(ScoringError::Layout(format!(
                "scorer header hash {} disagrees with its layout {}",
                file.layout_hash,
                format_hash(layout.hash())
            )));
        }
        let mut scorer = Self::new(&layout, file.order, file.add_k)?;
        for row in file.ngrams {
            let (&c, key) = row.split_last().ok_or_else(|| ScoringError::Malformed("empty n-gram row".into()))?;
            if key.is_empty() || key.len() > scorer.order {
                return Err(ScoringError::Malformed(format!("n-gram of length {}", key.len())));
            }
            let key: Vec<u32> = key
                .iter()
                .map(|&x| u32::try_from(x).map_err(|_| ScoringError::Malformed(format!("id {x}"))))
                .collect::<Result<_, _>>()?;
            scorer.check_ids(&key)?;
            let (target, h) = key.split_last().expect("non-empty");
            let tag = scorer.modality[*target as usize] as usize;
            let stats = bump(&mut scorer.contexts, h);
            stats.total += c;
            stats.by_modality[tag] += c;
            *bump(&mut scorer.counts, &key) += c;
        }
        Ok(scorer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScoringError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoringError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Same counts, layout and hyperparameters.
    pub fn same_model(&self, other: &NGramScorer) -> bool {
        self.layout == other.layout
            && self.order == other.order
            && self.add_k == other.add_k
            && self.counts == other.counts
            && self.contexts == other.contexts
    }
}

#[derive(Serialize, Deserialize)]
struct ScorerFile {
    layout: serde_json::Value,
    layout_hash: String,
    order: usize,
    add_k: f64,
    /// Each row is the n-gram ids followed by its count.
    ngrams: Vec<Vec<u64>>,
}

/// Total NLL (nats) and trained-token count over sequences with optional
/// masks.
pub fn corpus_nll<'a>(
    scorer: &NGramScorer,
    seqs: impl IntoIterator<Item = (&'a [u32], Option<&'a [bool]>)>,
) -> Result<(f64, usize), ScoringError> {
    let mut total = (0.0, 0);
    for (ids, mask) in seqs {
        let (nll, n) = scorer.sequence_nll(ids, mask)?;
        total.0 += nll;
        total.1 += n;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(100, 10_000).unwrap()
    }

    /// Independent oracle: counts by scanning every training n-gram.
    fn oracle_prob(train: &[Vec<u32>], order: usize, k: f64, v: usize, context: &[u32], x: u32) -> f64 {
        let max = context.len().min(order - 1);
        for j in (0..=max).rev() {
            let h = &context[context.len() - j..];
            let (mut c_h, mut c_hx) = (0u64, 0u64);
            for doc in train {
                for t in j..doc.len() {
                    if &doc[t - j..t] == h {
                        c_h += 1;
                        if doc[t] == x {
                            c_hx += 1;
                        }
                    }
                }
            }
            if c_h > 0 {
                return (c_hx as f64 + k) / (c_h as f64 + k * v as f64);
            }
        }
        1.0 / v as f64
    }

    #[test]
    fn untrained_is_uniform() {
        let l = layout();
        let s = NGramScorer::new(&l, 3, 0.5).unwrap();
        let d = s.next_dist(&[5, 6]);
        let v = l.vocab_size() as f64;
        assert!(d.iter().all(|&p| (p - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn bigram_hand_count() {
        let l = layout();
        let (a, b) = (10, 11);
        let s = NGramScorer::train(&l, 2, 1.0, [&[a, b, a, b][..]]).unwrap();
        let v = l.vocab_size() as f64;
        assert!((s.prob(&[a], b) - 3.0 / (2.0 + v)).abs() < 1e-15);
        assert!((s.prob(&[a], a) - 1.0 / (2.0 + v)).abs() < 1e-15);
    }

    #[test]
    fn backoff_to_shorter_context() {
        let l = layout();
        let s = NGramScorer::train(&l, 3, 1.0, [&[10, 11, 12][..]]).unwrap();
        let v = l.vocab_size() as f64;
        // (99, 11) unseen, (11) seen once
        assert!((s.prob(&[99, 11], 12) - 2.0 / (1.0 + v)).abs() < 1e-15);
        // nothing matches: unigram over the 3 training tokens
        assert!((s.prob(&[98], 12) - 2.0 / (3.0 + v)).abs() < 1e-15);
    }

    #[test]
    fn unit_only_training_predicts_units() {
        let l = VocabLayout::new(50, 20).unwrap();
        let u = |x| l.unit_to_id(x).unwrap();
        let doc: Vec<u32> = (0..200).map(|i| u(i % 7)).collect();
        let s = NGramScorer::train(&l, 2, 0.1, [&doc[..]]).unwrap();
        for ctx in [u(0), u(3), u(6)] {
            let d = s.next_dist(&[ctx]);
            let best = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap() as u32;
            assert_eq!(l.modality_of(best).unwrap(), Modality::Unit);
        }
    }

    #[test]
    fn uniform_restricted_ppl_is_modality_size() {
        let l = layout();
        let s = NGramScorer::new(&l, 2, 1.0).unwrap();
        let text: Vec<u32> = (10..30).collect();
        let nll = s.restricted_nll(&text, Span::new(0, text.len()), Modality::Text).unwrap();
        let ppl = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
        assert!((ppl - 100.0).abs() < 1e-9);
        let units: Vec<u32> = (0..20).map(|i| l.unit_to_id(i * 3).unwrap()).collect();
        let nll = s.restricted_nll(&units, Span::new(0, units.len()), Modality::Unit).unwrap();
        let ppl = (nll.iter().sum::<f64>() / nll.len() as f64).exp();
        assert!((ppl - 10_000.0).abs() < 1e-6);
    }

    #[test]
    fn restricted_rejects_wrong_modality() {
        let l = layout();
        let s = NGramScorer::new(&l, 2, 1.0).unwrap();
        assert!(s.restricted_nll(&[10, 11], Span::new(0, 2), Modality::Unit).is_err());
    }

    #[test]
    fn nll_of_half_probability_tokens() {
        // |V| = 11; 9 training copies of one token give (9 + 1) / (9 + 11) = 1/2
        let l = VocabLayout::new(8, 1).unwrap();
        let s = NGramScorer::train(&l, 1, 1.0, [&[5u32; 9][..]]).unwrap();
        let (nll, n) = corpus_nll(&s, [(&[5u32, 5, 5, 5][..], None)]).unwrap();
        assert_eq!(n, 4);
        assert!((nll - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((nll - 2.7726).abs() < 1e-4);
        assert_eq!(corpus_nll(&s, std::iter::empty()).unwrap(), (0.0, 0));
    }

    #[test]
    fn masks_skip_targets_but_keep_context() {
        let l = layout();
        let mut s = NGramScorer::new(&l, 2, 1.0).unwrap();
        s.add_document(&[10, 11, 12], Some(&[false, false, true])).unwrap();
        assert_eq!(s.n_tokens(), 1);
        let v = l.vocab_size() as f64;
        assert!((s.prob(&[11], 12) - 2.0 / (1.0 + v)).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip() {
        let l = layout();
        let s = NGramScorer::train(&l, 3, 0.25, [&[10, 11, 12, 10, 11][..], &[5, 6][..]]).unwrap();
        let back = NGramScorer::from_json(&s.to_json()).unwrap();
        assert!(back.same_model(&s));
    }

    fn small() -> VocabLayout {
        VocabLayout::new(8, 4).unwrap()
    }

    fn docs() -> impl Strategy<Value = Vec<Vec<u32>>> {
        prop::collection::vec(prop::collection::vec(0u32..14, 0..12), 0..6)
    }

    proptest! {
        #[test]
        fn matches_oracle(train in docs(), ctx in prop::collection::vec(0u32..14, 0..4), x in 0u32..14, order in 1usize..4) {
            let l = small();
            let s = NGramScorer::train(&l, order, 0.5, train.iter().map(Vec::as_slice)).unwrap();
            let want = oracle_prob(&train, order, 0.5, 14, &ctx, x);
            prop_assert!((s.prob(&ctx, x) - want).abs() < 1e-12);
        }

        #[test]
        fn distributions_sum_to_one(train in docs(), ctx in prop::collection::vec(0u32..14, 0..4)) {
            let l = small();
            let s = NGramScorer::train(&l, 3, 0.1, train.iter().map(Vec::as_slice)).unwrap();
            let sum: f64 = s.next_dist(&ctx).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for m in [Modality::Text, Modality::Unit, Modality::Special] {
                let sum: f64 = l.modality_range(m).map(|x| s.restricted_prob(&ctx, x, m)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn merge_equals_joint_training(a in docs(), b in docs(), c in docs()) {
            let l = small();
            let train = |d: &[Vec<u32>]| NGramScorer::train(&l, 3, 1.0, d.iter().map(Vec::as_slice)).unwrap();
            let mut ab = train(&a);
            ab.merge(&train(&b)).unwrap();
            let joint: Vec<Vec<u32>> = a.iter().chain(&b).cloned().collect();
            prop_assert!(ab.same_model(&train(&joint)));

            let mut ba = train(&b);
            ba.merge(&train(&a)).unwrap();
            prop_assert!(ba.same_model(&ab));

            let mut left = ab.clone();
            left.merge(&train(&c)).unwrap();
            let mut bc = train(&b);
            bc.merge(&train(&c)).unwrap();
            let mut right = train(&a);
            right.merge(&bc).unwrap();
            prop_assert!(left.same_model(&right));
        }

        #[test]
        fn nll_is_additive_and_consistent(train in docs(), a in docs(), b in docs()) {
            let l = small();
            let s = NGramScorer::train(&l, 2, 1.0, train.iter().map(Vec::as_slice)).unwrap();
            let nll = |d: &[Vec<u32>]| corpus_nll(&s, d.iter().map(|x| (x.as_slice(), None))).unwrap();
            let joint: Vec<Vec<u32>> = a.iter().chain(&b).cloned().collect();
            let (na, ca) = nll(&a);
            let (nb, cb) = nll(&b);
            let (nj, cj) = nll(&joint);
            prop_assert!((na + nb - nj).abs() < 1e-9);
            prop_assert_eq!(ca + cb, cj);
            let tokenwise: f64 = joint
                .iter()
                .flat_map(|d| (0..d.len()).map(move |t| (d, t)))
                .map(|(d, t)| -s.prob(&d[..t], d[t]).ln())
                .sum();
            if cj > 0 {
                prop_assert!(((nj / cj as f64).exp() - (tokenwise / cj as f64).exp()).abs() < 1e-9);
            }
        }

        #[test]
        fn restriction_never_lowers_probability(train in docs(), seq in prop::collection::vec(4u32..8, 1..8)) {
            let l = small();
            let s = NGramScorer::train(&l, 3, 0.5, train.iter().map(Vec::as_slice)).unwrap();
            let r = s.restricted_nll(&seq, Span::new(0, seq.len()), Modality::Text).unwrap();
            for (t, nll) in r.iter().enumerate() {
                prop_assert!(*nll <= -s.prob(&seq[..t], seq[t]).ln() + 1e-12);
            }
        }
    }
}
