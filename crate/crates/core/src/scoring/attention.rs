//! Aggregation of attention probabilities by source modality.

use ndarray::{s, Array3, ArrayView4, Axis};

use super::ScoringError;
use crate::vocab::Modality;

/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Head-averaged attention mass per source modality.
///
/// `attn` is `(layers, heads, targets, sources)`. The result is
/// `(layers, targets, 3)` holding `(speech, text, other)` per target, where
/// unit sources count as speech and relationship/control tokens as other.
pub fn attention_modality_profile(
    attn: ArrayView4<'_, f64>,
    source_tags: &[Modality],
) -> Result<Array3<f64>, ScoringError> {
    let (layers, heads, targets, sources) = attn.dim();
    if source_tags.len() != sources {
        return Err(ScoringError::Domain(format!("{} source tags for {sources} attention sources", source_tags.len())));
    }
    if heads == 0 {
        return Err(ScoringError::Domain("attention tensor has no heads".into()));
    }
    for l in 0..layers {
        for h in 0..heads {
            for t in 0..targets {
                let row = attn.slice(s![l, h, t, ..]);
                let sum = row.sum();
                if !sum.is_finite() || (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&p| p < 0.0) {
                    return Err(ScoringError::Domain(format!(
                        "attention row (layer {l}, head {h}, target {t}) sums to {sum}"
                    )));
                }
            }
        }
    }
    let mean = attn.mean_axis(Axis(1)).expect("at least one head");
    let mut out = Array3::zeros((layers, targets, 3));
    for ((l, t, s), &p) in mean.indexed_iter() {
        let slot = match source_tags[s] {
            Modality::Unit => 0,
            Modality::Text => 1,
            Modality::Special => 2,
        };
        out[[l, t, slot]] += p;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};
    use proptest::prelude::*;

    const U: Modality = Modality::Unit;
    const T: Modality = Modality::Text;
    const O: Modality = Modality::Special;

    #[test]
    fn single_row() {
        let a = Array4::from_shape_vec((1, 1, 1, 4), vec![0.2, 0.3, 0.4, 0.1]).unwrap();
        let p = attention_modality_profile(a.view(), &[U, U, T, T]).unwrap();
        assert!((p[[0, 0, 0]] - 0.5).abs() < 1e-12);
        assert!((p[[0, 0, 1]] - 0.5).abs() < 1e-12);
        assert_eq!(p[[0, 0, 2]], 0.0);
    }

    #[test]
    fn all_units() {
        let a = Array4::from_shape_vec((1, 1, 1, 3), vec![0.1, 0.6, 0.3]).unwrap();
        let p = attention_modality_profile(a.view(), &[U, U, U]).unwrap();
        assert!((p[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_mean() {
        let a = array![[[[1.0, 0.0]], [[0.0, 1.0]]]];
        let p = attention_modality_profile(a.view(), &[U, T]).unwrap();
        assert_eq!((p[[0, 0, 0]], p[[0, 0, 1]]), (0.5, 0.5));
    }

    #[test]
    fn errors() {
        let a = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.4]).unwrap();
        assert!(attention_modality_profile(a.view(), &[U, T]).is_err());
        let a = Array4::from_shape_vec((1, 1, 1, 2), vec![0.5, 0.5]).unwrap();
        assert!(attention_modality_profile(a.view(), &[U]).is_err());
    }

    proptest! {
        #[test]
        fn rows_stay_normalized(raw in prop::collection::vec(0.01f64..1.0, 2 * 3 * 4 * 5), tags in prop::collection::vec(0u8..3, 5)) {
            let mut a = Array4::from_shape_vec((2, 3, 4, 5), raw).unwrap();
            for mut row in a.lanes_mut(Axis(3)) {
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            let tags: Vec<Modality> = tags.iter().map(|&t| [U, T, O][t as usize]).collect();
            let p = attention_modality_profile(a.view(), &tags).unwrap();
            for lane in p.lanes(Axis(2)) {
                prop_assert!((lane.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
