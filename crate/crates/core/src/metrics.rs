//! Classification metrics: weighted (micro) accuracy, unweighted (macro
//! recall) accuracy, and support-weighted F1, plus the confusion matrix.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// Micro accuracy: trace(confusion) / total.
    pub wa: f64,
    /// Macro recall over classes with nonzero support.
    pub ua: f64,
    /// Support-weighted mean of per-class F1.
    pub wf1: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Classes with zero support, excluded from the UA average.
    pub excluded_classes: Vec<usize>,
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Computes all metrics from `(label, prediction)` pairs.
pub fn compute_metrics(pairs: &[(usize, usize)], num_classes: usize) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Empty("metric computation over zero samples"));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for &(label, pred) in pairs {
        if label >= num_classes || pred >= num_classes {
            return Err(Error::contract(format!(
                "label {label} / prediction {pred} out of range for {num_classes} classes"
            )));
        }
        confusion[label][pred] += 1;
    }

    let total: u64 = pairs.len() as u64;
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let wa = correct as f64 / total as f64;

    let mut recall_sum = 0.0;
    let mut supported = 0usize;
    let mut excluded_classes = Vec::new();
    let mut wf1 = 0.0;
    for c in 0..num_classes {
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..num_classes).map(|r| confusion[r][c]).sum();
        if support == 0 {
            excluded_classes.push(c);
            continue;
        }
        supported += 1;
        let recall = confusion[c][c] as f64 / support as f64;
        recall_sum += recall;
        let precision = if predicted == 0 {
            0.0
        } else {
            confusion[c][c] as f64 / predicted as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        wf1 += (support as f64 / total as f64) * f1;
    }
    let ua = recall_sum / supported.max(1) as f64;

    Ok(EvalMetrics {
        wa,
        ua,
        wf1,
        confusion,
        excluded_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent recount: per-class tallies recomputed directly from the
    /// pair list, no confusion matrix.
    fn naive_recount(pairs: &[(usize, usize)], num_classes: usize) -> (f64, f64, f64) {
        let total = pairs.len() as f64;
        let correct = pairs.iter().filter(|(l, p)| l == p).count() as f64;
        let wa = correct / total;

        let mut recalls = Vec::new();
        let mut wf1 = 0.0;
        for c in 0..num_classes {
            let support = pairs.iter().filter(|(l, _)| *l == c).count() as f64;
            if support == 0.0 {
                continue;
            }
            let hits = pairs.iter().filter(|(l, p)| *l == c && *p == c).count() as f64;
            let predicted = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
            let recall = hits / support;
            recalls.push(recall);
            let precision = if predicted == 0.0 { 0.0 } else { hits / predicted };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            wf1 += support / total * f1;
        }
        let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
        (wa, ua, wf1)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 3, i % 3)).collect();
        let m = compute_metrics(&pairs, 3).unwrap();
        assert_eq!((m.wa, m.ua, m.wf1), (1.0, 1.0, 1.0));
        assert!(m.excluded_classes.is_empty());
    }

    #[test]
    fn hand_counted_two_class_case() {
        // Supports {3, 1}: class 0 all correct, the class-1 sample wrong.
        let pairs = [(0, 0), (0, 0), (0, 0), (1, 0)];
        let m = compute_metrics(&pairs, 2).unwrap();
        assert_eq!(m.wa, 0.75);
        assert_eq!(m.ua, 0.5);
        assert_eq!(m.confusion, vec![vec![3, 0], vec![1, 0]]);
        // Class 0: P = 3/4, R = 1 -> F1 = 6/7; class 1: F1 = 0.
        assert!((m.wf1 - 0.75 * (6.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_independent_recount_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pairs: Vec<(usize, usize)> = (0..1000)
            .map(|_| (rng.random_range(0..6), rng.random_range(0..6)))
            .collect();
        let m = compute_metrics(&pairs, 6).unwrap();
        let (wa, ua, wf1) = naive_recount(&pairs, 6);
        assert!((m.wa - wa).abs() < 1e-12);
        assert!((m.ua - ua).abs() < 1e-12);
        assert!((m.wf1 - wf1).abs() < 1e-12);
    }

    #[test]
    fn wa_equals_ua_on_balanced_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Balanced labels, random predictions... but WA == UA requires equal
        // per-class accuracy weighting, which balance provides.
        let pairs: Vec<(usize, usize)> = (0..300)
            .map(|i| (i % 3, rng.random_range(0..3)))
            .collect();
        let m = compute_metrics(&pairs, 3).unwrap();
        assert!((m.wa - m.ua).abs() < 1e-12);
    }

    #[test]
    fn consistent_label_permutation_preserves_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pairs: Vec<(usize, usize)> = (0..500)
            .map(|_| (rng.random_range(0..4), rng.random_range(0..4)))
            .collect();
        let perm = [2usize, 3, 1, 0];
        let permuted: Vec<(usize, usize)> =
            pairs.iter().map(|&(l, p)| (perm[l], perm[p])).collect();
        let a = compute_metrics(&pairs, 4).unwrap();
        let b = compute_metrics(&permuted, 4).unwrap();
        assert!((a.wa - b.wa).abs() < 1e-12);
        assert!((a.ua - b.ua).abs() < 1e-12);
        assert!((a.wf1 - b.wf1).abs() < 1e-12);
    }

    #[test]
    fn zero_support_classes_are_excluded_and_reported() {
        let pairs = [(0, 0), (0, 1), (1, 1)];
        let m = compute_metrics(&pairs, 4).unwrap();
        assert_eq!(m.excluded_classes, vec![2, 3]);
        assert!((m.ua - (0.5 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_is_shift_invariant_and_tie_stable() {
        let row = [0.1f32, 0.9, 0.4];
        let shifted: Vec<f32> = row.iter().map(|v| v + 123.0).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
        assert_eq!(argmax(&[1.0f32, 1.0, 1.0]), 0);
    }
}
