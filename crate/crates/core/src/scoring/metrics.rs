//! Perplexity aggregation and word error rate.

use super::ScoringError;

/// Geometric mean of perplexities: `exp(mean(ln ppl))`.
pub fn ppl_aggregate(ppls: &[f64]) -> Result<f64, ScoringError> {
    if ppls.is_empty() {
        return Err(ScoringError::Domain("cannot aggregate an empty set of perplexities".into()));
    }
    if let Some(bad) = ppls.iter().find(|p| !(p.is_finite() && **p >= 1.0)) {
        return Err(ScoringError::Domain(format!("perplexity {bad} is not a finite value >= 1")));
    }
    Ok((ppls.iter().map(|p| p.ln()).sum::<f64>() / ppls.len() as f64).exp())
}

/// Lowercases, strips punctuation and re-splits on whitespace.
pub fn normalize_words<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .flat_map(|w| {
            let cleaned: String = w
                .as_ref()
                .chars()
                .filter(|c| c.is_alphanumeric() || c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect();
            cleaned.split_whitespace().map(str::to_string).collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WerDetail {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl WerDetail {
    pub fn edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.edits() as f64 / self.ref_len as f64
    }
}

/// Minimal word-level edit alignment after normalization.
pub fn wer_detail<S: AsRef<str>, H: AsRef<str>>(reference: &[S], hypothesis: &[H]) -> Result<WerDetail, ScoringError> {
    let r = normalize_words(reference);
    let h = normalize_words(hypothesis);
    if r.is_empty() {
        return Err(ScoringError::Domain("reference is empty after normalization".into()));
    }
    // dp[i][j]: (edits, subs, dels, ins) aligning r[..i] with h[..j]
    let (n, m) = (r.len(), h.len());
    let mut dp = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate().skip(1) {
        row[0] = (i, 0, i, 0);
    }
    for (j, cell) in dp[0].iter_mut().enumerate().skip(1) {
        *cell = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[i - 1][j - 1];
            let sub = if r[i - 1] == h[j - 1] { diag } else { (diag.0 + 1, diag.1 + 1, diag.2, diag.3) };
            let up = dp[i - 1][j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = dp[i][j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            dp[i][j] = [sub, del, ins].into_iter().min_by_key(|c| c.0).expect("three candidates");
        }
    }
    let (_, substitutions, deletions, insertions) = dp[n][m];
    Ok(WerDetail { substitutions, deletions, insertions, ref_len: n })
}

/// `(S + D + I) / len(ref)` after normalization.
pub fn wer<S: AsRef<str>, H: AsRef<str>>(reference: &[S], hypothesis: &[H]) -> Result<f64, ScoringError> {
    Ok(wer_detail(reference, hypothesis)?.rate())
}
