//! Classification metrics: confusion matrix, precision/recall/F1, accuracy.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confusion matrix has no samples")]
    Empty,
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// K×K counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, prediction: usize) -> Result<(), MetricsError> {
        if truth >= self.classes {
            return Err(MetricsError::ClassOutOfRange {
                class: truth,
                classes: self.classes,
            });
        }
        if prediction >= self.classes {
            return Err(MetricsError::ClassOutOfRange {
                class: prediction,
                classes: self.classes,
            });
        }
        self.counts[truth * self.classes + prediction] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Partial matrices merge by addition (metric accumulation is a
    /// commutative fold over samples).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.classes).map(|c| self.count(r, c)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|r| self.count(r, c)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub samples: u64,
}

/// Harmonic mean of a precision/recall pair; 0 whenever either side is 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 with unweighted macro averages, plus
/// overall accuracy. Zero denominators yield 0 by convention.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class: Vec<ClassScores> = (0..cm.classes())
        .map(|c| {
            let tp = cm.count(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassScores {
                precision,
                recall,
                f1: f1_from_pr(precision, recall),
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let trace: u64 = (0..cm.classes()).map(|c| cm.count(c, c)).sum();
    Ok(MetricsReport {
        macro_precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
        accuracy: trace as f64 / total as f64,
        samples: total,
        per_class,
    })
}

impl MetricsReport {
    /// Flat `name=value` lines, one metric per line.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.samples);
        let _ = writeln!(out, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(out, "macro_precision={:.6}", self.macro_precision);
        let _ = writeln!(out, "macro_recall={:.6}", self.macro_recall);
        let _ = writeln!(out, "macro_f1={:.6}", self.macro_f1);
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "class_{c}_precision={:.6}", s.precision);
            let _ = writeln!(out, "class_{c}_recall={:.6}", s.recall);
            let _ = writeln!(out, "class_{c}_f1={:.6}", s.f1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_matrix_is_perfect() {
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            for _ in 0..5 {
                cm.record(c, c).unwrap();
            }
        }
        let r = precision_recall_f1(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for s in &r.per_class {
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn aggregate_f1_reproduces_published_detection_rows() {
        // (P, R) → F1, checked to ±0.001
        assert!((f1_from_pr(0.767, 0.624) - 0.688).abs() <= 0.001);
        assert!((f1_from_pr(0.770, 0.619) - 0.687).abs() <= 0.001);
    }

    #[test]
    fn zero_denominators_yield_zero() {
        let mut cm = ConfusionMatrix::new(3);
        // nothing ever predicted or true for class 2
        cm.record(0, 0).unwrap();
        cm.record(1, 0).unwrap();
        let r = precision_recall_f1(&cm).unwrap();
        assert_eq!(r.per_class[2], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0 });
        // class 1 was never predicted: precision 0, recall 0 → f1 0
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let cm = ConfusionMatrix::new(4);
        assert!(precision_recall_f1(&cm).is_err());
    }

    #[test]
    fn merge_is_addition() {
        let mut a = ConfusionMatrix::new(2);
        let mut b = ConfusionMatrix::new(2);
        a.record(0, 1).unwrap();
        b.record(0, 1).unwrap();
        b.record(1, 1).unwrap();
        a.merge(&b);
        assert_eq!(a.count(0, 1), 2);
        assert_eq!(a.count(1, 1), 1);
        assert_eq!(a.total(), 3);
    }

    proptest! {
        #[test]
        fn f1_is_a_symmetric_harmonic_mean(p in 0.0f64..1.0, r in 0.0f64..1.0) {
            let f = f1_from_pr(p, r);
            prop_assert!((f1_from_pr(r, p) - f).abs() < 1e-12);
            prop_assert!(f <= p.max(r) + 1e-12);
            if p * r == 0.0 {
                prop_assert_eq!(f, 0.0);
            } else {
                prop_assert!(f <= 2.0 * p * r / (p + r) + 1e-12);
                prop_assert!(f >= p.min(r) - 1e-12 || f <= p.min(r) + 1e-12);
            }
        }

        #[test]
        fn balanced_truth_makes_accuracy_equal_macro_recall(
            rows in proptest::collection::vec(
                proptest::collection::vec(0u64..20, 3), 3)
        ) {
            // rescale every row to the same sum by recording row-major
            let mut cm = ConfusionMatrix::new(3);
            let target = 60u64;
            for (t, row) in rows.iter().enumerate() {
                let s: u64 = row.iter().sum();
                if s == 0 {
                    // degenerate row: put everything on the diagonal
                    for _ in 0..target {
                        cm.record(t, t).unwrap();
                    }
                    continue;
                }
                let mut placed = 0;
                for (p, &n) in row.iter().enumerate() {
                    let share = n * target / s;
                    for _ in 0..share {
                        cm.record(t, p).unwrap();
                    }
                    placed += share;
                }
                while placed < target {
                    cm.record(t, t).unwrap();
                    placed += 1;
                }
            }
            let r = precision_recall_f1(&cm).unwrap();
            prop_assert!((r.accuracy - r.macro_recall).abs() < 1e-12);
        }
    }
}
