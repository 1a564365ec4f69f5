//! Multi-task training: composite loss, optimizers, evaluation metrics and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{OptimizerConfig, TaskSampling, TrainConfig};
pub use loss::{composite_loss, HeadOutput, LossBreakdown, LossGrads, Target};
pub use metrics::{accuracy, f1_score, mean_absolute_error, MetricsReport, TaskMetric, Throughput};
pub use optim::{Adam, AnyOptimizer, Optimizer, Sgd};

use crate::error::{Error, Result};
use crate::model::{EcgMoe, PreparedRecord, Prediction, SharedState, Task, TaskState, NUM_TASKS};
use crate::nn::{Module, Tensor};
use crate::scalar::Scalar;
use crate::signal::TaskLabels;

/// Whether `labels` carries a target for `task`.
pub fn has_label(labels: &TaskLabels, task: Task) -> bool {
    match task {
        Task::Rr => labels.rr_interval_ms.is_some(),
        Task::Age => labels.age_years.is_some(),
        Task::Sex => labels.sex.is_some(),
        Task::Ka => labels.potassium_abnormal.is_some(),
        Task::Ad => labels.arrhythmia_class.is_some(),
    }
}

/// Training target for `task`, with regression labels normalized by the
/// model's target statistics.
pub fn target_for<S: Scalar>(model: &EcgMoe<S>, labels: &TaskLabels, task: Task) -> Option<Target> {
    let norm = |v: f64| {
        let (mean, std) = model.fusion.target_norm(task);
        Target::Value((v - mean) / std)
    };
    match task {
        Task::Rr => labels.rr_interval_ms.map(norm),
        Task::Age => labels.age_years.map(norm),
        Task::Sex => labels.sex.map(Target::Binary),
        Task::Ka => labels.potassium_abnormal.map(Target::Binary),
        Task::Ad => labels.arrhythmia_class.map(|c| Target::Class(c as usize)),
    }
}

/// Activations of one record for a set of tasks.
struct RecordPass<S> {
    shared: SharedState<S>,
    states: Vec<TaskState<S>>,
    /// Indices into `states` that feed the loss.
    in_loss: Vec<usize>,
    /// Mean `F_periodic` over the loss tasks.
    f_periodic: Option<Tensor<S>>,
}

struct BatchPass<S> {
    records: Vec<RecordPass<S>>,
    breakdown: LossBreakdown,
    grads: LossGrads<S>,
}

fn forward_record<S: Scalar>(
    model: &EcgMoe<S>,
    x: &PreparedRecord<S>,
    tasks: &[Task],
    loss_tasks: &[Task],
) -> Result<RecordPass<S>> {
    let shared = model.forward_shared(x)?;
    let mut states = Vec::with_capacity(tasks.len());
    let mut in_loss = Vec::new();
    let mut fp_sum: Option<Tensor<S>> = None;
    for &t in tasks {
        let s = model.forward_task(x, &shared, t)?;
        if loss_tasks.contains(&t) {
            in_loss.push(states.len());
            if let Some(fp) = s.f_periodic() {
                match fp_sum.as_mut() {
                    Some(acc) => acc.add_assign(fp),
                    None => fp_sum = Some(fp.clone()),
                }
            }
        }
        states.push(s);
    }
    let f_periodic = fp_sum.map(|mut t| {
        t.scale(S::one() / S::of(in_loss.len() as f64));
        t
    });
    Ok(RecordPass {
        shared,
        states,
        in_loss,
        f_periodic,
    })
}

/// Forward pass and composite loss of one batch. `tasks[i]` lists the tasks
/// run for record `i`; only those in `loss_tasks` (and labeled) enter the
/// loss. Returns `None` when no record has a loss target.
fn forward_batch<S: Scalar>(
    model: &EcgMoe<S>,
    records: &[&PreparedRecord<S>],
    tasks: &[Vec<Task>],
    loss_tasks: &[Task],
    cfg: &TrainConfig,
) -> Result<Option<BatchPass<S>>> {
    let mut passes = Vec::with_capacity(records.len());
    for (x, ts) in records.iter().zip(tasks) {
        passes.push(forward_record(model, x, ts, loss_tasks)?);
    }
    let mut targets = Vec::new();
    for (x, p) in records.iter().zip(&passes) {
        for &i in &p.in_loss {
            let task = p.states[i].task;
            let target = target_for(model, &x.labels, task)
                .ok_or_else(|| Error::InvalidRecord(format!("record {} has no `{task}` label", x.record_id)))?;
            targets.push(target);
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let heads: Vec<HeadOutput<'_, S>> = passes
        .iter()
        .flat_map(|p| p.in_loss.iter().map(move |&i| &p.states[i]))
        .zip(&targets)
        .map(|(s, &target)| HeadOutput {
            task: s.task,
            output: &s.output,
            target,
        })
        .collect();

    let contributing: Vec<&RecordPass<S>> = passes.iter().filter(|p| !p.in_loss.is_empty()).collect();
    let views = match &model.contrastive {
        Some(c) if contributing.iter().all(|p| p.f_periodic.is_some()) => {
            let mut zm = Vec::with_capacity(contributing.len());
            let mut zp = Vec::with_capacity(contributing.len());
            for p in &contributing {
                zm.push(c.proj_m.forward(&p.shared.multi_model.fused)?);
                zp.push(c.proj_p.forward(p.f_periodic.as_ref().expect("checked above"))?);
            }
            let zm: Vec<&[S]> = zm.iter().map(Tensor::data).collect();
            let zp: Vec<&[S]> = zp.iter().map(Tensor::data).collect();
            Some((Tensor::stack_rows(&zm)?, Tensor::stack_rows(&zp)?))
        }
        _ => None,
    };
    let (breakdown, grads) = composite_loss(&heads, views.as_ref().map(|(a, b)| (a, b)), cfg)?;
    drop(heads);
    Ok(Some(BatchPass {
        records: passes,
        breakdown,
        grads,
    }))
}

fn backward_batch<S: Scalar>(model: &mut EcgMoe<S>, pass: &BatchPass<S>) {
    let mut head = 0;
    let mut row = 0;
    for p in &pass.records {
        if p.in_loss.is_empty() {
            continue;
        }
        let mut grads = model.shared_grads(&p.shared);
        let mut d_fp_extra = None;
        if let (Some((dzm, dzp)), Some(c)) = (pass.grads.d_views.as_ref(), model.contrastive.as_mut()) {
            let gm = Tensor::vector(dzm.row(row).to_vec());
            grads.d_fm.add_assign(&c.proj_m.backward(&p.shared.multi_model.fused, &gm));
            if let Some(fp) = &p.f_periodic {
                let gp = Tensor::vector(dzp.row(row).to_vec());
                let mut d = c.proj_p.backward(fp, &gp);
                d.scale(S::one() / S::of(p.in_loss.len() as f64));
                d_fp_extra = Some(d);
            }
        }
        for &i in &p.in_loss {
            model.backward_task(&p.states[i], &pass.grads.d_outputs[head], d_fp_extra.as_ref(), &mut grads);
            head += 1;
        }
        model.backward_shared(&p.shared, &grads);
        row += 1;
    }
}

/// Picks the task record `pos` of the epoch trains on, or `None` when it
/// has no label for any enabled task.
fn assign_task<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    labels: &TaskLabels,
    pos: usize,
    epoch: usize,
    label_counts: &[usize; NUM_TASKS],
    rng: &mut R,
) -> Option<Task> {
    let n = cfg.tasks.len();
    match cfg.task_sampling {
        TaskSampling::RoundRobin => (0..n)
            .map(|k| cfg.tasks[(pos + epoch + k) % n])
            .find(|&t| has_label(labels, t)),
        TaskSampling::Proportional => {
            let weights: Vec<f64> = cfg
                .tasks
                .iter()
                .map(|&t| if has_label(labels, t) { label_counts[t.index()] as f64 } else { 0.0 })
                .collect();
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                return None;
            }
            let mut u = rng.random::<f64>() * total;
            for (&t, &w) in cfg.tasks.iter().zip(&weights) {
                if w > 0.0 && u < w {
                    return Some(t);
                }
                u -= w;
            }
            cfg.tasks.iter().rev().zip(weights.iter().rev()).find(|(_, &w)| w > 0.0).map(|(&t, _)| t)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Batch losses averaged over the epoch, weighted by batch size.
    pub train: LossBreakdown,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose weights were kept (lowest validation composite loss).
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

/// Trains `model` in place. When `val` is non-empty the weights with the
/// lowest validation composite loss are restored at the end.
///
/// Regression target statistics are not refit here; call
/// [`EcgMoe::fit_target_norms`] on the training labels first.
pub fn train<S: Scalar>(
    model: &mut EcgMoe<S>,
    train: &[PreparedRecord<S>],
    val: &[PreparedRecord<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidHyper("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AnyOptimizer::new(&cfg.optimizer, cfg.learning_rate);
    let mut label_counts = [0usize; NUM_TASKS];
    for x in train {
        for t in Task::ALL {
            label_counts[t.index()] += has_label(&x.labels, t) as usize;
        }
    }
    model.zero_grad();
    let mut report = TrainReport::default();
    let mut best: Option<Vec<Tensor<S>>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.freeze_trunk {
            model.set_trunk_frozen(epoch >= cfg.trunk_warmup_epochs);
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut records = Vec::with_capacity(chunk.len());
            let mut tasks = Vec::with_capacity(chunk.len());
            for (j, &idx) in chunk.iter().enumerate() {
                let x = &train[idx];
                let pos = step * cfg.batch_size + j;
                if let Some(t) = assign_task(cfg, &x.labels, pos, epoch, &label_counts, &mut rng) {
                    records.push(x);
                    tasks.push(vec![t]);
                }
            }
            let Some(pass) = forward_batch(model, &records, &tasks, &cfg.tasks, cfg)? else {
                continue;
            };
            if !pass.breakdown.total.is_finite() {
                return Err(Error::DivergedLoss { epoch, step });
            }
            backward_batch(model, &pass);
            opt.step_module(model);
            epoch_loss.accumulate(&pass.breakdown, records.len() as f64);
            seen += records.len();
        }
        if seen > 0 {
            let mut mean = LossBreakdown::default();
            mean.accumulate(&epoch_loss, 1.0 / seen as f64);
            epoch_loss = mean;
        }
        let val_report = if val.is_empty() {
            None
        } else {
            let m = evaluate(model, val, cfg)?;
            let improved = report.best_val_loss.is_none_or(|b| m.loss.total < b);
            if improved && m.loss.total.is_finite() {
                report.best_val_loss = Some(m.loss.total);
                report.best_epoch = Some(epoch);
                best = Some(model.params().iter().map(|p| p.value.clone()).collect());
            }
            Some(m)
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}{} ({:.1} s)",
            epoch_loss.total,
            val_report
                .as_ref()
                .map(|m| format!(", val loss {:.4}", m.loss.total))
                .unwrap_or_default(),
            started.elapsed().as_secs_f64()
        );
        report.epochs.push(EpochStats {
            epoch,
            train: epoch_loss,
            val: val_report,
        });
    }
    if let Some(values) = best {
        for (p, v) in model.params_mut().into_iter().zip(values) {
            p.value = v;
        }
    }
    model.set_trunk_frozen(false);
    model.zero_grad();
    Ok(report)
}

/// Metrics for every labeled task and the composite loss over `cfg.tasks`,
/// batched as in training (records in order, `cfg.batch_size` at a time).
pub fn evaluate<S: Scalar>(model: &EcgMoe<S>, data: &[PreparedRecord<S>], cfg: &TrainConfig) -> Result<MetricsReport> {
    let mut reg: [(Vec<f64>, Vec<f64>); NUM_TASKS] = Default::default();
    let mut bin: [(Vec<bool>, Vec<bool>); NUM_TASKS] = Default::default();
    let mut cls: [(Vec<usize>, Vec<usize>); NUM_TASKS] = Default::default();
    let mut loss = LossBreakdown::default();
    let mut weight = 0usize;
    for chunk in data.chunks(cfg.batch_size.max(1)) {
        let records: Vec<&PreparedRecord<S>> = chunk.iter().collect();
        let tasks: Vec<Vec<Task>> = chunk
            .iter()
            .map(|x| Task::ALL.into_iter().filter(|&t| has_label(&x.labels, t)).collect())
            .collect();
        let pass = forward_batch(model, &records, &tasks, &cfg.tasks, cfg)?;
        let Some(pass) = pass else {
            continue;
        };
        for (x, p) in chunk.iter().zip(&pass.records) {
            for s in &p.states {
                let k = s.task.index();
                match (model.decode(s.task, &s.output), s.task) {
                    (Prediction::Value(v), Task::Rr) => {
                        reg[k].0.push(v);
                        reg[k].1.extend(x.labels.rr_interval_ms);
                    }
                    (Prediction::Value(v), _) => {
                        reg[k].0.push(v);
                        reg[k].1.extend(x.labels.age_years);
                    }
                    (Prediction::Binary { positive, .. }, Task::Sex) => {
                        bin[k].0.push(positive);
                        bin[k].1.extend(x.labels.sex);
                    }
                    (Prediction::Binary { positive, .. }, _) => {
                        bin[k].0.push(positive);
                        bin[k].1.extend(x.labels.potassium_abnormal);
                    }
                    (Prediction::Class { class, .. }, _) => {
                        cls[k].0.push(class);
                        cls[k].1.extend(x.labels.arrhythmia_class.map(usize::from));
                    }
                }
            }
        }
        let n = pass.records.iter().filter(|p| !p.in_loss.is_empty()).count();
        loss.accumulate(&pass.breakdown, n as f64);
        weight += n;
    }
    if weight > 0 {
        let mut mean = LossBreakdown::default();
        mean.accumulate(&loss, 1.0 / weight as f64);
        loss = mean;
    }
    let mut tasks = Vec::new();
    for t in Task::ALL {
        let k = t.index();
        let (value, count) = if !reg[k].0.is_empty() {
            (mean_absolute_error(&reg[k].0, &reg[k].1), reg[k].0.len())
        } else if !bin[k].0.is_empty() {
            (f1_score(&bin[k].0, &bin[k].1), bin[k].0.len())
        } else if !cls[k].0.is_empty() {
            (accuracy(&cls[k].0, &cls[k].1), cls[k].0.len())
        } else {
            continue;
        };
        tasks.push(TaskMetric {
            task: t,
            metric: t.metric_name().to_string(),
            value,
            count,
        });
    }
    Ok(MetricsReport {
        records: data.len(),
        tasks,
        loss,
    })
}

/// [`evaluate`] plus its wall-clock throughput.
pub fn evaluate_timed<S: Scalar>(
    model: &EcgMoe<S>,
    data: &[PreparedRecord<S>],
    cfg: &TrainConfig,
) -> Result<(MetricsReport, Throughput)> {
    let t0 = Instant::now();
    let report = evaluate(model, data, cfg)?;
    let seconds = t0.elapsed().as_secs_f64();
    Ok((
        report,
        Throughput {
            records: data.len(),
            seconds,
            records_per_s: if seconds > 0.0 { data.len() as f64 / seconds } else { f64::INFINITY },
        },
    ))
}

/// Runs one optimizer step on a single batch where every record trains on
/// `task`. Exposed for isolation checks and fine-grained drivers.
pub fn train_step<S: Scalar, O: Optimizer<S>>(
    model: &mut EcgMoe<S>,
    batch: &[PreparedRecord<S>],
    task: Task,
    cfg: &TrainConfig,
    opt: &mut O,
) -> Result<Option<LossBreakdown>> {
    let records: Vec<&PreparedRecord<S>> = batch.iter().filter(|x| has_label(&x.labels, task)).collect();
    let tasks = vec![vec![task]; records.len()];
    let Some(pass) = forward_batch(model, &records, &tasks, &[task], cfg)? else {
        return Ok(None);
    };
    if !pass.breakdown.total.is_finite() {
        return Err(Error::DivergedLoss { epoch: 0, step: 0 });
    }
    backward_batch(model, &pass);
    opt.step_module(model);
    Ok(Some(pass.breakdown))
}
