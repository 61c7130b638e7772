//! Per-class confusion counts with precision / recall / F1 and the
//! support-weighted F1 aggregate.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record ids of predictions and truths differ: {0}")]
    IdMismatch(String),
    #[error("every class has zero support; weighted F1 undefined")]
    NoSupport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Metrics for one class. `precision`, `recall` and `f1` are `None` when the
/// corresponding ratio is 0/0.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub counts: ConfusionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

impl ClassMetrics {
    pub fn from_counts(class_name: impl Into<String>, counts: ConfusionCounts) -> Self {
        let (precision, recall, f1) = precision_recall_f1(&counts);
        Self {
            class_name: class_name.into(),
            counts,
            precision,
            recall,
            f1,
            support: counts.tp + counts.fn_,
        }
    }
}

/// Per-class confusion counts of predicted vs true label sets.
///
/// Both maps must be keyed by exactly the same record ids; each record
/// contributes once per class.
pub fn tally(
    predictions: &BTreeMap<String, BTreeSet<String>>,
    truths: &BTreeMap<String, BTreeSet<String>>,
    classes: &[String],
) -> Result<BTreeMap<String, ConfusionCounts>, MetricsError> {
    let missing_truth: Vec<&String> = predictions
        .keys()
        .filter(|id| !truths.contains_key(*id))
        .collect();
    let missing_pred: Vec<&String> = truths
        .keys()
        .filter(|id| !predictions.contains_key(*id))
        .collect();
    if !missing_truth.is_empty() || !missing_pred.is_empty() {
        let mut parts = Vec::new();
        if !missing_truth.is_empty() {
            parts.push(format!(
                "no ground truth for [{}]",
                join_ids(&missing_truth)
            ));
        }
        if !missing_pred.is_empty() {
            parts.push(format!("no predictions for [{}]", join_ids(&missing_pred)));
        }
        return Err(MetricsError::IdMismatch(parts.join("; ")));
    }

    let mut out: BTreeMap<String, ConfusionCounts> = classes
        .iter()
        .map(|c| (c.clone(), ConfusionCounts::default()))
        .collect();
    for (id, predicted) in predictions {
        let truth = &truths[id];
        for class in classes {
            let c = out.get_mut(class).expect("class present");
            match (predicted.contains(class), truth.contains(class)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(out)
}

fn join_ids(ids: &[&String]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(|id| id.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", … ({} total)", ids.len()));
    }
    s
}

/// (precision, recall, f1); `None` marks an undefined 0/0 ratio.
pub fn precision_recall_f1(c: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>) {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    (precision, recall, f1)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Support-weighted mean of per-class F1; classes with zero support are
/// skipped, undefined F1 on a supported class counts as zero.
pub fn weighted_f1(per_class: &[ClassMetrics]) -> Result<f64, MetricsError> {
    let total: usize = per_class.iter().map(|m| m.support).sum();
    if total == 0 {
        return Err(MetricsError::NoSupport);
    }
    let sum: f64 = per_class
        .iter()
        .filter(|m| m.support > 0)
        .map(|m| m.f1.unwrap_or(0.0) * m.support as f64)
        .sum();
    Ok(sum / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tally_direct_enumeration() {
        let mut preds = BTreeMap::new();
        let mut truths = BTreeMap::new();
        preds.insert("r1".into(), set(&["A"]));
        truths.insert("r1".into(), set(&["A"]));
        preds.insert("r2".into(), set(&["A"]));
        truths.insert("r2".into(), set(&["A"]));
        preds.insert("r3".into(), set(&["A"]));
        truths.insert("r3".into(), set(&[]));
        preds.insert("r4".into(), set(&[]));
        truths.insert("r4".into(), set(&["A"]));
        let out = tally(&preds, &truths, &["A".to_string()]).unwrap();
        assert_eq!(out["A"], counts(2, 1, 1, 0));
    }

    #[test]
    fn tally_empty_corpus_is_all_zero() {
        let out = tally(&BTreeMap::new(), &BTreeMap::new(), &["A".to_string()]).unwrap();
        assert_eq!(out["A"], ConfusionCounts::default());
    }

    #[test]
    fn tally_perfect_predictor_has_no_errors() {
        let mut preds = BTreeMap::new();
        for i in 0..6 {
            let classes = if i % 2 == 0 { set(&["A"]) } else { set(&["B"]) };
            preds.insert(format!("r{i}"), classes);
        }
        let truths = preds.clone();
        let classes = vec!["A".to_string(), "B".to_string()];
        let out = tally(&preds, &truths, &classes).unwrap();
        for c in &classes {
            assert_eq!(out[c].fp, 0);
            assert_eq!(out[c].fn_, 0);
            let m = ClassMetrics::from_counts(c.clone(), out[c]);
            assert_eq!(m.f1, Some(1.0));
        }
    }

    #[test]
    fn tally_rejects_mismatched_ids() {
        let mut preds = BTreeMap::new();
        preds.insert("r1".into(), set(&["A"]));
        let err = tally(&preds, &BTreeMap::new(), &["A".to_string()]).unwrap_err();
        assert!(err.to_string().contains("r1"));
    }

    /// Half a printed decimal, inclusive at the boundary (0.925 vs "0.93").
    const PRINT_TOL: f64 = 5e-3 + 1e-12;

    #[test]
    fn prf_published_rows() {
        // Brake-system style counts
        let (p, r, f) = precision_recall_f1(&counts(23, 1, 8, 0));
        assert!((p.unwrap() - 0.96).abs() <= PRINT_TOL);
        assert!((r.unwrap() - 0.74).abs() <= PRINT_TOL);
        assert!((f.unwrap() - 0.84).abs() <= PRINT_TOL);
        // Wheel/tire style counts
        let (p, r, f) = precision_recall_f1(&counts(37, 3, 3, 0));
        assert!((p.unwrap() - 0.93).abs() <= PRINT_TOL);
        assert!((r.unwrap() - 0.93).abs() <= PRINT_TOL);
        assert!((f.unwrap() - 0.93).abs() <= PRINT_TOL);
    }

    #[test]
    fn prf_degenerate_is_undefined() {
        let (p, r, f) = precision_recall_f1(&counts(0, 0, 0, 12));
        assert!(p.is_none() && r.is_none() && f.is_none());
    }

    #[test]
    fn weighted_f1_single_class_is_identity() {
        let m = ClassMetrics::from_counts("A", counts(3, 1, 1, 0));
        let w = weighted_f1(std::slice::from_ref(&m)).unwrap();
        assert!((w - m.f1.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn weighted_f1_equal_supports_is_plain_mean() {
        let a = ClassMetrics::from_counts("A", counts(4, 0, 1, 0));
        let b = ClassMetrics::from_counts("B", counts(3, 2, 2, 0));
        let w = weighted_f1(&[a.clone(), b.clone()]).unwrap();
        let mean = (a.f1.unwrap() + b.f1.unwrap()) / 2.0;
        assert!((w - mean).abs() < 1e-15);
    }

    #[test]
    fn weighted_f1_ignores_zero_support_and_reorders() {
        let a = ClassMetrics::from_counts("A", counts(4, 0, 1, 0));
        let b = ClassMetrics::from_counts("B", counts(6, 3, 2, 0));
        let z = ClassMetrics::from_counts("Z", counts(0, 2, 0, 9));
        let w1 = weighted_f1(&[a.clone(), z.clone(), b.clone()]).unwrap();
        let w2 = weighted_f1(&[b, a, z]).unwrap();
        assert!((w1 - w2).abs() < 1e-15);
    }

    #[test]
    fn weighted_f1_all_zero_support_is_error() {
        let z = ClassMetrics::from_counts("Z", counts(0, 0, 0, 4));
        assert!(matches!(weighted_f1(&[z]), Err(MetricsError::NoSupport)));
    }

    #[test]
    fn f1_between_min_and_max_of_p_and_r() {
        for tp in 0..6usize {
            for fp in 0..6usize {
                for fn_ in 0..6usize {
                    let (p, r, f) = precision_recall_f1(&counts(tp, fp, fn_, 1));
                    if let (Some(p), Some(r), Some(f)) = (p, r, f) {
                        assert!(f <= p.max(r) + 1e-12);
                        assert!(f >= p.min(r) - 1e-12);
                        assert!(f <= 2.0 * p + 1e-12 && f <= 2.0 * r + 1e-12);
                    }
                }
            }
        }
    }
}
