//! Confusion matrices and the recall/F1 summaries reported per fold.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("confusion matrix holds no samples")]
    EmptyMatrix,
    #[error("class index {0} outside a {1}-class matrix")]
    ClassOutOfRange(usize, usize),
    #[error("cannot combine {0}-class and {1}-class matrices")]
    ClassCountMismatch(usize, usize),
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    /// Panics unless `counts` is square.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let n = counts.len();
        assert!(counts.iter().all(|row| row.len() == n), "confusion matrix must be square");
        Self { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), MetricsError> {
        let n = self.classes();
        if truth >= n || predicted >= n {
            return Err(MetricsError::ClassOutOfRange(truth.max(predicted), n));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Element-wise sum, used to pool leave-one-subject-out folds.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes() != self.classes() {
            return Err(MetricsError::ClassCountMismatch(self.classes(), other.classes()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn pooled<'a>(classes: usize, parts: impl IntoIterator<Item = &'a ConfusionMatrix>) -> Result<Self, MetricsError> {
        let mut out = Self::new(classes);
        for p in parts {
            out.add(p)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub war: f64,
    pub uar: f64,
    pub f1: f64,
    pub wf1: f64,
}

/// Weighted and unweighted average recall, macro F1 and support-weighted F1.
///
/// Classes without test samples are left out of the UAR and macro-F1
/// averages and contribute nothing to WF1.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics, MetricsError> {
    let n = cm.total();
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.classes();
    let counts = cm.counts();
    let mut tp_sum = 0u64;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut wf1 = 0.0;
    let mut supported = 0usize;
    for k in 0..c {
        let tp = counts[k][k];
        let support: u64 = counts[k].iter().sum();
        let predicted: u64 = (0..c).map(|r| counts[r][k]).sum();
        tp_sum += tp;
        if support == 0 {
            continue;
        }
        supported += 1;
        let fp = predicted - tp;
        let fn_ = support - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        recall_sum += tp as f64 / support as f64;
        f1_sum += f1;
        wf1 += support as f64 / n as f64 * f1;
    }
    Ok(Metrics {
        war: tp_sum as f64 / n as f64,
        uar: recall_sum / supported as f64,
        f1: f1_sum / supported as f64,
        wf1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let mut cm = ConfusionMatrix::new(3);
        for (k, n) in [3, 1, 5].into_iter().enumerate() {
            for _ in 0..n {
                cm.record(k, k).unwrap();
            }
        }
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.war, m.uar, m.f1, m.wf1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_predicted_as_one_class() {
        // Supports (3, 1), every sample predicted as the first class.
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![1, 0]]);
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.war, 0.75);
        assert_eq!(m.uar, 0.5);
    }

    #[test]
    fn empty_matrix() {
        assert_eq!(compute_metrics(&ConfusionMatrix::new(5)), Err(MetricsError::EmptyMatrix));
    }

    #[test]
    fn zero_support_class_is_skipped() {
        // Class 2 has no samples but one false positive.
        let cm = ConfusionMatrix::from_counts(vec![vec![2, 0, 1], vec![0, 2, 0], vec![0, 0, 0]]);
        let m = compute_metrics(&cm).unwrap();
        assert!((m.uar - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((m.f1 - (0.8 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn record_out_of_range() {
        let mut cm = ConfusionMatrix::new(2);
        assert_eq!(cm.record(0, 2), Err(MetricsError::ClassOutOfRange(2, 2)));
    }
}
