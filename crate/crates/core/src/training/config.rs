use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

/// How each record in a batch is assigned the task whose loss it feeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSampling {
    /// Cycle through the enabled tasks in epoch order.
    #[default]
    RoundRobin,
    /// Draw a task with probability proportional to its label count.
    Proportional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the contrastive term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task_sampling: TaskSampling,
    pub optimizer: OptimizerConfig,
    pub temperature: f64,
    /// Tasks whose losses are trained.
    pub tasks: Vec<Task>,
    /// Freeze the shared trunk after `trunk_warmup_epochs` epochs.
    pub freeze_trunk: bool,
    pub trunk_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            task_sampling: TaskSampling::RoundRobin,
            optimizer: OptimizerConfig::default(),
            temperature: 0.5,
            tasks: Task::ALL.to_vec(),
            freeze_trunk: true,
            trunk_warmup_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("train.{field}"), msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", format!("{} must be a finite value >= 0", self.lambda));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", format!("{} must be a finite value >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if self.lambda > 0.0 && self.batch_size < 2 {
            return fail("batch_size", "must be >= 2 when lambda > 0 (the contrastive term needs negatives)".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature", format!("{} must be > 0", self.temperature));
        }
        if self.tasks.is_empty() {
            return fail("tasks", "at least one task is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return fail("tasks", format!("task `{t}` listed twice"));
            }
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) {
                return fail("optimizer.beta1", format!("{beta1} outside [0, 1)"));
            }
            if !(0.0..1.0).contains(&beta2) {
                return fail("optimizer.beta2", format!("{beta2} outside [0, 1)"));
            }
            if !(eps > 0.0 && eps.is_finite()) {
                return fail("optimizer.eps", format!("{eps} must be > 0"));
            }
        }
        Ok(())
    }
}
