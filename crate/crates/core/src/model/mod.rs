//! The full network: multi-model branch, periodic expert network, fusion
//! gates and task heads, with explicit forward/backward passes split into a
//! task-independent part (run once per record) and a per-task part.

pub mod config;
pub mod extractors;
pub mod fusion;
pub mod periodic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ExtractorKind, ExtractorSpec, ModelConfig, Segmentation, Task, TaskKind, NUM_TASKS};
pub use extractors::{MultiModelBranch, MultiModelOutput};
pub use fusion::FusionHead;
pub use periodic::{PeriodicMoe, PeriodicOutput};

use crate::beats::{detect_r_peaks, fixed_grid_peaks, global_stats, segment_beats};
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Parameter, Tensor};
use crate::scalar::Scalar;
use crate::signal::{EcgRecord, TaskLabels};
use extractors::MultiModelCache;
use fusion::{FuseCache, PredictCache};
use periodic::{ExpertCache, GateCache, IntegrateCache};

/// Beat-level inputs of the periodic branch.
#[derive(Clone, Debug)]
pub struct BeatInput<S> {
    pub r_peaks: Vec<usize>,
    /// `[B × L]` beats of the detection lead.
    pub beats: Tensor<S>,
    /// Per-beat RR feature; beat `i > 0` carries the gap ending at it, beat 0
    /// the first gap.
    pub rr_feature: Vec<S>,
    /// Gate statistics: per-lead mean/std of the raw signal, then RR
    /// mean/std/min/max in seconds.
    pub stats: Tensor<S>,
}

/// A record after normalization, detection and segmentation.
#[derive(Clone, Debug)]
pub struct PreparedRecord<S> {
    pub record_id: String,
    /// `[C × T]`, z-normalized per lead.
    pub signal: Tensor<S>,
    pub periodic: Option<BeatInput<S>>,
    pub labels: TaskLabels,
}

/// Task-independent activations of one record.
pub struct SharedState<S> {
    pub multi_model: MultiModelOutput<S>,
    mm_cache: MultiModelCache<S>,
    /// `[5 × d_e]` expert outputs.
    pub experts: Option<Tensor<S>>,
    expert_cache: Option<ExpertCache<S>>,
}

impl<S: Scalar> SharedState<S> {
    /// Folding period chosen by each spectral-fold extractor, in extractor
    /// order (`None` for other kinds).
    pub fn fold_periods(&self) -> Vec<Option<usize>> {
        self.mm_cache.extractors.iter().map(|c| c.period()).collect()
    }
}

/// Per-task activations of one record.
pub struct TaskState<S> {
    pub task: Task,
    pub periodic: Option<PeriodicOutput<S>>,
    pub fused: Tensor<S>,
    pub output: Tensor<S>,
    gate_cache: Option<GateCache<S>>,
    integrate_cache: Option<IntegrateCache<S>>,
    fuse_cache: FuseCache<S>,
    predict_cache: PredictCache<S>,
}

impl<S: Scalar> TaskState<S> {
    pub fn alpha_m(&self) -> S {
        self.fuse_cache.alpha_m
    }

    pub fn alpha_p(&self) -> Option<S> {
        self.fuse_cache.alpha_p
    }

    pub fn gate_weights(&self) -> Option<&Tensor<S>> {
        self.periodic.as_ref().map(|p| &p.gate_weights)
    }

    pub fn f_periodic(&self) -> Option<&Tensor<S>> {
        self.periodic.as_ref().map(|p| &p.f_periodic)
    }
}

/// Upstream gradients summed over every task run on one record.
pub struct SharedGrads<S> {
    pub d_fm: Tensor<S>,
    pub d_experts: Option<Tensor<S>>,
}

/// Projection heads used only by the contrastive term.
#[derive(Clone, Debug)]
pub struct ContrastiveHeads<S> {
    pub proj_m: Linear<S>,
    pub proj_p: Linear<S>,
}

/// Decoded prediction in task units.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Value(f64),
    Binary { logit: f64, positive: bool },
    Class { class: usize, logits: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct EcgMoe<S> {
    config: ModelConfig,
    pub multi_model: MultiModelBranch<S>,
    pub periodic: Option<PeriodicMoe<S>>,
    pub task_embeddings: Vec<Parameter<S>>,
    pub fusion: FusionHead<S>,
    pub contrastive: Option<ContrastiveHeads<S>>,
}

impl<S: Scalar> EcgMoe<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let multi_model = MultiModelBranch::new(&config, &mut rng)?;
        let periodic = if config.periodic_branch {
            Some(PeriodicMoe::new(&config, &mut rng)?)
        } else {
            None
        };
        let task_embeddings = Task::ALL
            .iter()
            .map(|t| Parameter::new(format!("task.{}.embedding", t.name()), Tensor::uniform(&[config.d_t], 1.0, &mut rng)))
            .collect();
        let fusion = FusionHead::new(&config, &mut rng)?;
        let contrastive = config.periodic_branch.then(|| ContrastiveHeads {
            proj_m: Linear::new("cont.proj_m", config.multi_model_dim(), config.contrastive_dim, true, &mut rng),
            proj_p: Linear::new("cont.proj_p", config.d_p, config.contrastive_dim, true, &mut rng),
        });
        let model = Self {
            config,
            multi_model,
            periodic,
            task_embeddings,
            fusion,
            contrastive,
        };
        assert_eq!(
            model.multi_model.output_dim() + model.periodic.as_ref().map_or(0, |_| model.config.d_p),
            model.config.fused_dim(),
            "fused dimension bookkeeping"
        );
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Scalar>(&self) -> EcgMoe<T> {
        let mut out = EcgMoe::<T>::new(self.config.clone(), 0).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.cast();
            dst.frozen = src.frozen;
        }
        out
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        self.fusion.set_trunk_frozen(frozen);
    }

    /// Sets regression target normalization from training labels.
    pub fn fit_target_norms<'a>(&mut self, labels: impl IntoIterator<Item = &'a TaskLabels>) {
        let (mut rr, mut age) = (Vec::new(), Vec::new());
        for l in labels {
            rr.extend(l.rr_interval_ms);
            age.extend(l.age_years);
        }
        for (task, v) in [(Task::Rr, rr), (Task::Age, age)] {
            if v.is_empty() {
                continue;
            }
            let (mean, std) = crate::signal::mean_std(&v);
            self.fusion.set_target_norm(task, mean, if std > 1e-9 { std } else { 1.0 });
        }
    }

    pub fn prepare(&self, record: &EcgRecord) -> Result<PreparedRecord<S>> {
        let cfg = &self.config;
        if record.num_leads() != cfg.leads {
            return Err(Error::InvalidRecord(format!(
                "record {} has {} leads, model expects {}",
                record.record_id,
                record.num_leads(),
                cfg.leads
            )));
        }
        let z = record.znormalize()?;
        let signal = Tensor::from_f64(&[z.num_leads(), z.len()], z.samples())?;
        let periodic = if cfg.periodic_branch {
            let peaks = match cfg.segmentation {
                Segmentation::RPeak => detect_r_peaks(&z, cfg.detection_lead)?,
                Segmentation::FixedWindow => fixed_grid_peaks(z.len(), z.sample_rate_hz, cfg.fixed_window_ms),
            };
            let bs = segment_beats(&z, cfg.detection_lead, &peaks, cfg.beat_len)?;
            let mut stats = global_stats(record, &bs);
            let n = stats.len();
            stats[n - 4..].iter_mut().for_each(|v| *v /= 1000.0);
            let rr_feature = (0..bs.num_beats())
                .map(|i| {
                    let rr = bs.rr_ms[i.max(1) - 1];
                    S::of((rr - cfg.rr_norm_mean_ms) / cfg.rr_norm_std_ms)
                })
                .collect();
            Some(BeatInput {
                beats: Tensor::from_f64(&[bs.num_beats(), bs.beat_len], &bs.beats)?,
                r_peaks: bs.r_peaks,
                rr_feature,
                stats: Tensor::from_f64(&[n], &stats)?,
            })
        } else {
            None
        };
        Ok(PreparedRecord {
            record_id: record.record_id.clone(),
            signal,
            periodic,
            labels: record.labels.clone(),
        })
    }

    pub fn forward_shared(&self, x: &PreparedRecord<S>) -> Result<SharedState<S>> {
        let (multi_model, mm_cache) = self.multi_model.forward(&x.signal)?;
        let (experts, expert_cache) = match (&self.periodic, &x.periodic) {
            (Some(p), Some(b)) => {
                let (e, c) = p.experts.forward(&b.beats, &b.rr_feature)?;
                (Some(e), Some(c))
            }
            (None, _) => (None, None),
            (Some(_), None) => {
                return Err(Error::InvalidRecord(format!(
                    "record {} was prepared without beats",
                    x.record_id
                )))
            }
        };
        Ok(SharedState {
            multi_model,
            mm_cache,
            experts,
            expert_cache,
        })
    }

    /// Runs the expert gate for `task` on prepared statistics.
    pub fn gate(&self, stats: &Tensor<S>, task: Task) -> Result<Tensor<S>> {
        let p = self
            .periodic
            .as_ref()
            .ok_or_else(|| Error::InvalidHyper("model has no periodic branch".into()))?;
        Ok(p.gate.forward(stats, &self.task_embeddings[task.index()].value)?.0)
    }

    pub fn forward_task(&self, x: &PreparedRecord<S>, shared: &SharedState<S>, task: Task) -> Result<TaskState<S>> {
        let e_t = &self.task_embeddings[task.index()].value;
        let (periodic, gate_cache, integrate_cache) = match (&self.periodic, &shared.experts, &x.periodic) {
            (Some(p), Some(experts), Some(b)) => {
                let (g, gc) = p.gate.forward(&b.stats, e_t)?;
                let (out, ic) = p.integrate(experts, &g)?;
                (Some(out), Some(gc), Some(ic))
            }
            _ => (None, None, None),
        };
        let f_p = periodic.as_ref().map(|p| &p.f_periodic);
        let (fused, fuse_cache) = self.fusion.fuse(&shared.multi_model.fused, f_p, e_t)?;
        let (output, predict_cache) = self.fusion.predict(&fused, task)?;
        Ok(TaskState {
            task,
            periodic,
            fused,
            output,
            gate_cache,
            integrate_cache,
            fuse_cache,
            predict_cache,
        })
    }

    pub fn shared_grads(&self, shared: &SharedState<S>) -> SharedGrads<S> {
        SharedGrads {
            d_fm: Tensor::zeros(shared.multi_model.fused.shape()),
            d_experts: shared.experts.as_ref().map(|e| Tensor::zeros(e.shape())),
        }
    }

    /// Backward through the per-task part. `d_fp_extra` is an additional
    /// gradient on `F_periodic` (from the contrastive term).
    pub fn backward_task(
        &mut self,
        state: &TaskState<S>,
        d_out: &Tensor<S>,
        d_fp_extra: Option<&Tensor<S>>,
        grads: &mut SharedGrads<S>,
    ) {
        let k = state.task.index();
        let d_fused = self.fusion.predict_backward(&state.predict_cache, d_out);
        let (d_fm, d_fp, d_e) = self.fusion.fuse_backward(&state.fuse_cache, &d_fused);
        grads.d_fm.add_assign(&d_fm);
        self.task_embeddings[k].accumulate_tensor(&d_e);
        if let (Some(p), Some(ic), Some(gc), Some(mut d_fp)) = (
            self.periodic.as_mut(),
            state.integrate_cache.as_ref(),
            state.gate_cache.as_ref(),
            d_fp,
        ) {
            if let Some(extra) = d_fp_extra {
                d_fp.add_assign(extra);
            }
            let (d_experts, d_gate) = p.integrate_backward(ic, &d_fp);
            if let Some(acc) = grads.d_experts.as_mut() {
                acc.add_assign(&d_experts);
            }
            let d_e = p.gate.backward(gc, &d_gate, self.config.d_t);
            self.task_embeddings[k].accumulate_tensor(&d_e);
        }
    }

    pub fn backward_shared(&mut self, shared: &SharedState<S>, grads: &SharedGrads<S>) {
        self.multi_model.backward(&shared.multi_model, &shared.mm_cache, &grads.d_fm);
        if let (Some(p), Some(c), Some(d)) = (self.periodic.as_mut(), shared.expert_cache.as_ref(), grads.d_experts.as_ref()) {
            p.experts.backward(c, d);
        }
    }

    /// Decodes a raw head output into task units.
    pub fn decode(&self, task: Task, output: &Tensor<S>) -> Prediction {
        let raw = output.to_f64_vec();
        match task.kind() {
            TaskKind::Regression => {
                let (mean, std) = self.fusion.target_norm(task);
                Prediction::Value(raw[0] * std + mean)
            }
            TaskKind::Binary => Prediction::Binary {
                logit: raw[0],
                positive: raw[0] > 0.0,
            },
            TaskKind::Multiclass(_) => {
                let class = (0..raw.len()).max_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(b.cmp(&a))).unwrap_or(0);
                Prediction::Class { class, logits: raw }
            }
        }
    }

    pub fn predict(&self, x: &PreparedRecord<S>, task: Task) -> Result<Prediction> {
        let shared = self.forward_shared(x)?;
        let state = self.forward_task(x, &shared, task)?;
        Ok(self.decode(task, &state.output))
    }
}

impl<S: Scalar> Module<S> for ContrastiveHeads<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.proj_m.collect_params(out);
        self.proj_p.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.proj_m.collect_params_mut(out);
        self.proj_p.collect_params_mut(out);
    }
}

impl<S: Scalar> Module<S> for EcgMoe<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.multi_model.collect_params(out);
        self.periodic.collect_params(out);
        self.task_embeddings.collect_params(out);
        self.fusion.collect_params(out);
        self.contrastive.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.multi_model.collect_params_mut(out);
        self.periodic.collect_params_mut(out);
        self.task_embeddings.collect_params_mut(out);
        self.fusion.collect_params_mut(out);
        self.contrastive.collect_params_mut(out);
    }
}
