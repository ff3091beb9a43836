//! Classification metrics for imbalanced evaluation; positive class is
//! high risk (label 1).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Per-metric scores; `undefined` lists metrics whose denominator was
/// zero and which were reported as 0 rather than silently inflated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
    pub g_mean: f64,
    pub undefined: Vec<String>,
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => {}
        }
    }
    Ok(cm)
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| -> f64 {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = (cm.tp + cm.tn) as f64 / total as f64;
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let specificity = ratio("specificity", cm.tn, cm.tn + cm.fp);
    let f1 = if precision + recall == 0.0 {
        undefined.push("f1".to_string());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Scores {
        accuracy,
        precision,
        recall,
        specificity,
        f1,
        g_mean: (recall * specificity).sqrt(),
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier() {
        let cm = confusion(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        let s = scores(&cm).unwrap();
        for v in [s.accuracy, s.precision, s.recall, s.specificity, s.f1, s.g_mean] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn inverted_classifier() {
        let cm = confusion(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        let s = scores(&cm).unwrap();
        assert_eq!(s.g_mean, 0.0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn zero_recall_zeroes_gmean_and_f1() {
        let cm = ConfusionMatrix {
            tp: 0,
            fp: 0,
            tn: 10,
            fn_: 5,
        };
        let s = scores(&cm).unwrap();
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.g_mean, 0.0);
        assert_eq!(s.f1, 0.0);
        assert!(s.undefined.contains(&"precision".to_string()));
    }

    #[test]
    fn f1_from_reported_precision_recall() {
        // recall 0.540, precision 0.853 -> f1 = 0.6614
        let (p, r) = (0.853f64, 0.540f64);
        let f1 = 2.0 * p * r / (p + r);
        assert!((f1 - 0.661).abs() < 1e-3);
    }

    #[test]
    fn gmean_bounds_and_accuracy_identity_on_random_matrices() {
        let mut rng = crate::rng::StreamRng::new(5, "metrics-prop", 0);
        for _ in 0..1000 {
            let cm = ConfusionMatrix {
                tp: rng.next_index(50) + 1,
                fp: rng.next_index(50),
                tn: rng.next_index(200) + 1,
                fn_: rng.next_index(50),
            };
            let s = scores(&cm).unwrap();
            for v in [s.accuracy, s.precision, s.recall, s.specificity, s.f1, s.g_mean] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(s.g_mean <= s.recall.max(s.specificity) + 1e-12);
            assert!(s.g_mean >= s.recall.min(s.specificity) - 1e-12);
            let pos = (cm.tp + cm.fn_) as f64;
            let neg = (cm.tn + cm.fp) as f64;
            let identity = (s.recall * pos + s.specificity * neg) / cm.total() as f64;
            assert!((identity - s.accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(confusion(&[1], &[1, 0]).is_err());
    }
}
