//! Classification metrics with machine (label 1) as the positive class.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub precision: f64,
    pub recall: f64,
    /// F1 of the positive class (machine).
    pub f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Confusion counts and derived scores. The positive class is "machine"
/// because the task is machine-text detection.
pub fn compute_metrics(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v > 1) {
        return Err(Error::InvalidLabel(i64::from(bad)));
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    let mut tn = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }

    let f1_of = |tp: usize, fp: usize, fneg: usize| -> (f64, f64, f64) {
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fneg > 0 {
            tp as f64 / (tp + fneg) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    };

    let (precision, recall, f1) = f1_of(tp, fp, fneg);
    // Human-as-positive counts are the mirror image.
    let (_, _, f1_human) = f1_of(tn, fneg, fp);
    let total = predictions.len() as f64;

    Ok(Metrics {
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
        true_negative: tn,
        precision,
        recall,
        f1,
        macro_f1: (f1 + f1_human) / 2.0,
        accuracy: (tp + tn) as f64 / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_hit_one() {
        let labels = [0u8, 1, 1, 0, 1];
        let m = compute_metrics(&labels, &labels).unwrap();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn hand_evaluated_confusion_matrix() {
        // TP=3, FP=1, FN=2, TN=0 -> P=0.75, R=0.6, F1=0.666667
        let predictions = [1u8, 1, 1, 1, 0, 0];
        let labels = [1u8, 1, 1, 0, 1, 1];
        let m = compute_metrics(&predictions, &labels).unwrap();
        assert_eq!(
            (m.true_positive, m.false_positive, m.false_negative),
            (3, 1, 2)
        );
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 0.666667).abs() < 1e-6);
    }

    #[test]
    fn all_human_predictions_on_balanced_labels() {
        let predictions = [0u8; 6];
        let labels = [0u8, 0, 0, 1, 1, 1];
        let m = compute_metrics(&predictions, &labels).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn counts_sum_to_evaluation_size() {
        let predictions = [1u8, 0, 1, 0];
        let labels = [1u8, 1, 0, 0];
        let m = compute_metrics(&predictions, &labels).unwrap();
        assert_eq!(
            m.true_positive + m.false_positive + m.false_negative + m.true_negative,
            4
        );
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(compute_metrics(&[0], &[0, 1]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }
}
