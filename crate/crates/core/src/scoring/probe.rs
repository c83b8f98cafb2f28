//! Multinomial naive Bayes probe over unit histograms.

use super::ScoringError;

/// Per-class add-one smoothed unit frequencies plus a class prior.
#[derive(Debug, Clone)]
pub struct UnitProbe {
    classes: Vec<usize>,
    log_prior: Vec<f64>,
    /// `log_lik[c][u]`
    log_lik: Vec<Vec<f64>>,
}

impl UnitProbe {
    /// Fits on `(units, label)` pairs over unit ids `0..n_units`.
    pub fn fit(train: &[(Vec<u32>, usize)], n_units: usize) -> Result<Self, ScoringError> {
        let mut classes: Vec<usize> = train.iter().map(|(_, y)| *y).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(ScoringError::Domain(format!("probe needs at least 2 classes, got {}", classes.len())));
        }
        let mut counts = vec![vec![0u64; n_units]; classes.len()];
        let mut docs = vec![0u64; classes.len()];
        for (units, y) in train {
            let c = classes.binary_search(y).expect("collected above");
            docs[c] += 1;
            for &u in units {
                let slot = counts[c]
                    .get_mut(u as usize)
                    .ok_or_else(|| ScoringError::Domain(format!("unit {u} outside 0..{n_units}")))?;
                *slot += 1;
            }
        }
        let n = train.len() as f64;
        let log_prior = docs.iter().map(|&d| (d as f64 / n).ln()).collect();
        let log_lik = counts
            .iter()
            .map(|row| {
                let total = row.iter().sum::<u64>() as f64 + n_units as f64;
                row.iter().map(|&c| ((c + 1) as f64 / total).ln()).collect()
            })
            .collect();
        Ok(Self { classes, log_prior, log_lik })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Most probable class; ties go to the smallest label.
    pub fn predict(&self, units: &[u32]) -> usize {
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (c, &label) in self.classes.iter().enumerate() {
            let score = self.log_prior[c]
                + units.iter().map(|&u| self.log_lik[c].get(u as usize).copied().unwrap_or(0.0)).sum::<f64>();
            if score > best.0 {
                best = (score, label);
            }
        }
        best.1
    }
}

/// Fraction of `test` labels the probe fitted on `train` recovers.
pub fn probe_label_accuracy(train: &[(Vec<u32>, usize)], test: &[(Vec<u32>, usize)]) -> Result<f64, ScoringError> {
    if test.is_empty() {
        return Err(ScoringError::Domain("probe test set is empty".into()));
    }
    let n_units = train.iter().flat_map(|(u, _)| u).max().map_or(0, |&m| m as usize + 1);
    let probe = UnitProbe::fit(train, n_units)?;
    let hits = test.iter().filter(|(u, y)| probe.predict(u) == *y).count();
    Ok(hits as f64 / test.len() as f64)
}
