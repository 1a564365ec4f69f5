//! Sum of per-task losses plus the weighted contrastive term.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Task, TaskKind, NUM_TASKS};
use crate::nn::loss::{bce_with_logits, cross_entropy, mae, nt_xent};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Training target in head units (regression targets already normalized).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Value(f64),
    Binary(bool),
    Class(usize),
}

/// One head output in a batch.
pub struct HeadOutput<'a, S> {
    pub task: Task,
    pub output: &'a Tensor<S>,
    pub target: Target,
}

/// Per-task mean losses, the weighted contrastive term and their total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tasks: [Option<f64>; NUM_TASKS],
    /// Already multiplied by `lambda`.
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn task(&self, task: Task) -> Option<f64> {
        self.tasks[task.index()]
    }

    /// Sum of the reported terms.
    pub fn term_sum(&self) -> f64 {
        self.tasks.iter().flatten().sum::<f64>() + self.contrastive
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        for (a, b) in self.tasks.iter_mut().zip(&other.tasks) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + weight * b);
            }
        }
        self.contrastive += weight * other.contrastive;
        self.total += weight * other.total;
    }
}

pub struct LossGrads<S> {
    /// Gradient for each head output, in input order.
    pub d_outputs: Vec<Tensor<S>>,
    /// Gradients on the two contrastive views.
    pub d_views: Option<(Tensor<S>, Tensor<S>)>,
}

fn task_loss<S: Scalar>(task: Task, output: &Tensor<S>, target: Target) -> Result<(S, Tensor<S>)> {
    match (task.kind(), target) {
        (TaskKind::Regression, Target::Value(v)) => mae(output, &Tensor::vector(vec![S::of(v)])),
        (TaskKind::Binary, Target::Binary(b)) => {
            bce_with_logits(output, &Tensor::vector(vec![if b { S::one() } else { S::zero() }]))
        }
        (TaskKind::Multiclass(_), Target::Class(c)) => cross_entropy(output, c),
        _ => Err(Error::InvalidHyper(format!("target {target:?} does not fit task `{task}`"))),
    }
}

/// `sum_k mean_{i in task k} L_k(i) + lambda * nt_xent(z_m, z_p)`.
///
/// `views` holds the two `[N × d]` contrastive embeddings of the batch; the
/// term is skipped when `lambda` is zero, the views are absent or the batch
/// has a single record.
pub fn composite_loss<S: Scalar>(
    heads: &[HeadOutput<'_, S>],
    views: Option<(&Tensor<S>, &Tensor<S>)>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, LossGrads<S>)> {
    if heads.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut counts = [0usize; NUM_TASKS];
    for h in heads {
        counts[h.task.index()] += 1;
    }
    let mut sums = [0.0f64; NUM_TASKS];
    let mut d_outputs = Vec::with_capacity(heads.len());
    for h in heads {
        let k = h.task.index();
        let (l, g) = task_loss(h.task, h.output, h.target)?;
        sums[k] += l.f64();
        d_outputs.push(g.scaled(S::of(1.0 / counts[k] as f64)));
    }
    let mut breakdown = LossBreakdown::default();
    for k in 0..NUM_TASKS {
        if counts[k] > 0 {
            breakdown.tasks[k] = Some(sums[k] / counts[k] as f64);
        }
    }
    let mut d_views = None;
    if let Some((z_m, z_p)) = views {
        if cfg.lambda > 0.0 && z_m.rows() >= 2 {
            let nt = nt_xent(z_m, z_p, cfg.temperature)?;
            let lambda = S::of(cfg.lambda);
            breakdown.contrastive = cfg.lambda * nt.loss.f64();
            d_views = Some((nt.dz1.scaled(lambda), nt.dz2.scaled(lambda)));
        }
    }
    breakdown.total = breakdown.term_sum();
    Ok((breakdown, LossGrads { d_outputs, d_views }))
}
