use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use crate::model::Task;

/// F1 of binary predictions; 1 when there are no positives at all in either
/// predictions or labels.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "f1_score length mismatch");
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "accuracy length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mean_absolute_error length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: Task,
    /// `mae`, `f1` or `acc`.
    pub metric: String,
    pub value: f64,
    /// Labeled records the metric was computed on.
    pub count: usize,
}

/// Evaluation summary: one metric per labeled task and the composite loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub tasks: Vec<TaskMetric>,
    pub loss: LossBreakdown,
}

impl MetricsReport {
    pub fn metric(&self, task: Task) -> Option<f64> {
        self.tasks.iter().find(|m| m.task == task).map(|m| m.value)
    }

    pub fn composite_loss(&self) -> f64 {
        self.loss.total
    }
}

/// Wall-clock cost of an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub records: usize,
    pub seconds: f64,
    pub records_per_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_known_case() {
        // tp = 2, fp = 1, fn = 1
        let pred = [true, true, true, false, false];
        let truth = [true, true, false, true, false];
        assert!((f1_score(&pred, &truth) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f1_without_positives_is_one() {
        assert_eq!(f1_score(&[false, false], &[false, false]), 1.0);
        assert_eq!(f1_score(&[true], &[false]), 0.0);
    }

    #[test]
    fn accuracy_and_mae() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]), 0.75);
        assert_eq!(mean_absolute_error(&[1.0, -1.0], &[0.0, 1.0]), 1.5);
    }
}
