//! Binary and multi-label detection metrics.
//!
//! Predictions are positive when the probability is at least the threshold.
//! Ties in AUC count one half; AP is computed per distinct score threshold, so
//! tied scores share one precision value.

use serde::{Deserialize, Serialize};

use crate::data_model::NUM_TYPES;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelMetrics {
    /// Absent when no class has a positive.
    pub map: Option<f64>,
    pub cf1: f64,
    pub of1: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: Option<f64>,
    pub map: Option<f64>,
    pub cf1: f64,
    pub of1: f64,
    pub n_samples: usize,
    pub per_class_ap: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn new(binary: BinaryMetrics, multi: MultiLabelMetrics, n_samples: usize) -> Self {
        Self { acc: binary.acc, auc: binary.auc, map: multi.map, cf1: multi.cf1, of1: multi.of1, n_samples, per_class_ap: multi.per_class_ap }
    }
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::Argument(format!("label {y} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Sorted order of `scores` (ascending; NaN already rejected).
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Mann-Whitney AUC with mid-ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    check_labels(labels)?;
    check_scores(scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let order = ascending(scores);
    // Count, for each positive, negatives strictly below plus half the tied ones.
    let mut favourable = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_here = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        let neg_here = (j - i) - pos_here;
        favourable += pos_here as f64 * (neg_below as f64 + 0.5 * neg_here as f64);
        neg_below += neg_here;
        i = j;
    }
    Ok(Some(favourable / (n_pos as f64 * n_neg as f64)))
}

pub fn binary_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    if scores.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let auc = auc(scores, labels)?;
    let correct = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == (y == 1)).count();
    Ok(BinaryMetrics { acc: correct as f64 / scores.len() as f64, auc })
}

/// Mean over positives of the precision at that positive's score threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    check_labels(labels)?;
    check_scores(scores)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut sum = 0.0;
    let (mut seen, mut seen_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_here = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        seen += j - i;
        seen_pos += pos_here;
        sum += pos_here as f64 * seen_pos as f64 / seen as f64;
        i = j;
    }
    Ok(Some(sum / n_pos as f64))
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

pub fn multilabel_metrics(probs: &[[f64; NUM_TYPES]], labels: &[[u8; NUM_TYPES]], threshold: f64) -> Result<MultiLabelMetrics> {
    if probs.len() != labels.len() {
        return Err(Error::Argument(format!("{} prediction rows but {} label rows", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let mut per_class_ap = Vec::with_capacity(NUM_TYPES);
    let mut f1s = Vec::with_capacity(NUM_TYPES);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..NUM_TYPES {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<u8> = labels.iter().map(|l| l[c]).collect();
        per_class_ap.push(average_precision(&s, &y)?);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &t) in s.iter().zip(&y) {
            match (p >= threshold, t == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        f1s.push(f1(tp, fp, fn_));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(MultiLabelMetrics { map, cf1: f1s.iter().sum::<f64>() / NUM_TYPES as f64, of1: f1(tp_all, fp_all, fn_all), per_class_ap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(s: &[f64], y: &[u8]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    fn threshold_ap(s: &[f64], y: &[u8]) -> Option<f64> {
        let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i] == 1).collect();
        if pos.is_empty() {
            return None;
        }
        let total: f64 = pos
            .iter()
            .map(|&i| {
                let above = (0..s.len()).filter(|&j| s[j] >= s[i]).count();
                let pos_above = pos.iter().filter(|&&j| s[j] >= s[i]).count();
                pos_above as f64 / above as f64
            })
            .sum();
        Some(total / pos.len() as f64)
    }

    #[test]
    fn binary_examples() {
        let m = binary_metrics(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((m.acc, m.auc), (1.0, Some(1.0)));
        assert_eq!(auc(&[0.9, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), Some(0.75));
        let m = binary_metrics(&[0.9, 0.2], &[0, 0], 0.5).unwrap();
        assert_eq!((m.acc, m.auc), (0.5, None));
        assert!(binary_metrics(&[0.1], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), Some(0.5));
    }

    #[test]
    fn ap_example() {
        let ap = average_precision(&[0.9, 0.7, 0.3], &[1, 0, 1]).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_multilabel() {
        let mut labels = Vec::new();
        for c in 0..NUM_TYPES {
            let mut y = [0u8; NUM_TYPES];
            y[c] = 1;
            labels.push(y);
        }
        labels.push([0; NUM_TYPES]);
        let probs: Vec<[f64; NUM_TYPES]> = labels.iter().map(|y| y.map(f64::from)).collect();
        let m = multilabel_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!((m.map, m.cf1, m.of1), (Some(1.0), 1.0, 1.0));
    }

    #[test]
    fn absent_class_excluded_from_map_but_scores_zero_f1() {
        let labels = vec![[1, 0, 0, 0, 0, 0, 0], [0; NUM_TYPES]];
        let probs = vec![[0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], [0.1; NUM_TYPES]];
        let m = multilabel_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(m.map, Some(1.0));
        assert_eq!(m.per_class_ap[1], None);
        assert!((m.cf1 - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(m.of1, 1.0);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (1usize..=200).prop_flat_map(|n| (proptest::collection::vec((0u8..20).prop_map(|k| k as f64 / 19.0), n), proptest::collection::vec(0u8..=1, n)))
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise((s, y) in instance()) {
            let (a, b) = (auc(&s, &y).unwrap(), pairwise_auc(&s, &y));
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn ap_matches_threshold_oracle((s, y) in instance()) {
            let (a, b) = (average_precision(&s, &y).unwrap(), threshold_ap(&s, &y));
            prop_assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps((s, y) in instance(), k in 0.1..5.0f64, c in -3.0..3.0f64) {
            let mapped: Vec<f64> = s.iter().map(|x| (k * x + c).exp()).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&mapped, &y).unwrap());
        }
    }
}
