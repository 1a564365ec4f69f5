//! Branch-level gating of `F_m` and `F_periodic`, and the LoRA-adapted task
//! heads on a shared trunk.

use rand::Rng;

use super::config::{ModelConfig, Task, NUM_TASKS};
use crate::error::{Error, Result};
use crate::nn::lora::LoraCache;
use crate::nn::ops;
use crate::nn::{Linear, LoraAdapter, Module, Parameter, Tensor};
use crate::scalar::Scalar;

/// `concat(alpha_m * f_m, alpha_p * f_p)`.
pub fn fuse_with<S: Scalar>(f_m: &Tensor<S>, f_p: Option<&Tensor<S>>, alpha_m: S, alpha_p: S) -> Tensor<S> {
    let a = f_m.scaled(alpha_m);
    match f_p {
        Some(p) => Tensor::concat(&[&a, &p.scaled(alpha_p)]),
        None => a,
    }
}

pub struct FuseCache<S> {
    input: Tensor<S>,
    f_m: Tensor<S>,
    f_p: Option<Tensor<S>>,
    pub alpha_m: S,
    pub alpha_p: Option<S>,
}

pub struct PredictCache<S> {
    lora: LoraCache<S>,
    hidden: Tensor<S>,
    task: Task,
}

#[derive(Clone, Debug)]
pub struct FusionHead<S> {
    pub gate_m: Linear<S>,
    pub gate_p: Option<Linear<S>>,
    pub trunk: Linear<S>,
    pub adapters: Vec<LoraAdapter<S>>,
    pub outputs: Vec<Linear<S>>,
    /// `[tasks × 2]` (mean, std) used to normalize regression targets.
    pub target_norm: Parameter<S>,
}

impl<S: Scalar> FusionHead<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d_m = cfg.multi_model_dim();
        let d_f = cfg.fused_dim();
        let gate_in = d_f + cfg.d_t;
        let gate_m = Linear::new("fusion.gate_m", gate_in, 1, true, rng);
        let gate_p = cfg
            .periodic_branch
            .then(|| Linear::new("fusion.gate_p", gate_in, 1, true, rng));
        debug_assert_eq!(d_f, d_m + if cfg.periodic_branch { cfg.d_p } else { 0 });
        let trunk = Linear::new("head.trunk", d_f, cfg.d_h, true, rng);
        let mut adapters = Vec::with_capacity(NUM_TASKS);
        let mut outputs = Vec::with_capacity(NUM_TASKS);
        for t in Task::ALL {
            adapters.push(LoraAdapter::new(
                &format!("head.{}", t.name()),
                d_f,
                cfg.d_h,
                cfg.lora_rank,
                cfg.lora_alpha,
                rng,
            )?);
            outputs.push(Linear::new(&format!("head.{}.out", t.name()), cfg.d_h, t.output_dim(), true, rng));
        }
        let mut norm = Vec::with_capacity(2 * NUM_TASKS);
        for _ in 0..NUM_TASKS {
            norm.extend([S::zero(), S::one()]);
        }
        let mut target_norm = Parameter::new("head.target_norm", Tensor::from_vec(&[NUM_TASKS, 2], norm)?);
        target_norm.frozen = true;
        Ok(Self {
            gate_m,
            gate_p,
            trunk,
            adapters,
            outputs,
            target_norm,
        })
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        self.trunk.set_frozen(frozen);
    }

    pub fn target_norm(&self, task: Task) -> (f64, f64) {
        let r = self.target_norm.value.row(task.index());
        (r[0].f64(), r[1].f64())
    }

    pub fn set_target_norm(&mut self, task: Task, mean: f64, std: f64) {
        let r = self.target_norm.value.row_mut(task.index());
        r[0] = S::of(mean);
        r[1] = S::of(std);
    }

    /// Computes both branch gates from `[f_m ⊕ f_p ⊕ e_t]` and fuses.
    pub fn fuse(
        &self,
        f_m: &Tensor<S>,
        f_p: Option<&Tensor<S>>,
        task_embedding: &Tensor<S>,
    ) -> Result<(Tensor<S>, FuseCache<S>)> {
        if f_p.is_some() != self.gate_p.is_some() {
            return Err(Error::InvalidHyper("periodic feature presence does not match the model".into()));
        }
        let input = match f_p {
            Some(p) => Tensor::concat(&[f_m, p, task_embedding]),
            None => Tensor::concat(&[f_m, task_embedding]),
        };
        let alpha_m = ops::sigmoid(self.gate_m.forward(&input)?.data()[0]);
        let alpha_p = match &self.gate_p {
            Some(g) => Some(ops::sigmoid(g.forward(&input)?.data()[0])),
            None => None,
        };
        let fused = fuse_with(f_m, f_p, alpha_m, alpha_p.unwrap_or(S::zero()));
        Ok((
            fused,
            FuseCache {
                input,
                f_m: f_m.clone(),
                f_p: f_p.cloned(),
                alpha_m,
                alpha_p,
            },
        ))
    }

    /// Returns `(d_f_m, d_f_p, d_task_embedding)`.
    pub fn fuse_backward(&mut self, cache: &FuseCache<S>, d_fused: &Tensor<S>) -> (Tensor<S>, Option<Tensor<S>>, Tensor<S>) {
        let d_m = cache.f_m.len();
        let dm = &d_fused.data()[..d_m];
        let mut d_input = Tensor::zeros(&[cache.input.len()]);

        let mut d_fm = Tensor::vector(dm.iter().map(|&g| g * cache.alpha_m).collect());
        let da: S = dm.iter().zip(cache.f_m.data()).map(|(&g, &f)| g * f).sum();
        let ds = Tensor::vector(vec![da * cache.alpha_m * (S::one() - cache.alpha_m)]);
        d_input.add_assign(&self.gate_m.backward(&cache.input, &ds));

        let mut d_fp = None;
        if let (Some(gate), Some(f_p), Some(alpha)) = (self.gate_p.as_mut(), cache.f_p.as_ref(), cache.alpha_p) {
            let dp = &d_fused.data()[d_m..];
            d_fp = Some(Tensor::vector(dp.iter().map(|&g| g * alpha).collect()));
            let da: S = dp.iter().zip(f_p.data()).map(|(&g, &f)| g * f).sum();
            let ds = Tensor::vector(vec![da * alpha * (S::one() - alpha)]);
            d_input.add_assign(&gate.backward(&cache.input, &ds));
        }

        let d_p_len = cache.f_p.as_ref().map_or(0, Tensor::len);
        d_fm.add_assign(&Tensor::vector(d_input.data()[..d_m].to_vec()));
        if let (Some(d), true) = (d_fp.as_mut(), d_p_len > 0) {
            d.add_assign(&Tensor::vector(d_input.data()[d_m..d_m + d_p_len].to_vec()));
        }
        let d_e = Tensor::vector(d_input.data()[d_m + d_p_len..].to_vec());
        (d_fm, d_fp, d_e)
    }

    /// Raw head output: one value for regression (normalized units), one
    /// logit for binary tasks, class logits for arrhythmia.
    pub fn predict(&self, fused: &Tensor<S>, task: Task) -> Result<(Tensor<S>, PredictCache<S>)> {
        let k = task.index();
        let mut pre = self.trunk.forward(fused)?;
        let (delta, lora) = self.adapters[k].forward(fused)?;
        pre.add_assign(&delta);
        let hidden = ops::relu(&pre);
        let out = self.outputs[k].forward(&hidden)?;
        Ok((out, PredictCache { lora, hidden, task }))
    }

    /// Trunk activation for a task (for inspection).
    pub fn trunk_activation(cache: &PredictCache<S>) -> &Tensor<S> {
        &cache.hidden
    }

    pub fn predict_backward(&mut self, cache: &PredictCache<S>, d_out: &Tensor<S>) -> Tensor<S> {
        let k = cache.task.index();
        let dh = self.outputs[k].backward(&cache.hidden, d_out);
        let dpre = ops::relu_backward(&cache.hidden, &dh);
        let mut dx = self.adapters[k].backward(&cache.lora, &dpre);
        dx.add_assign(&self.trunk.backward(cache.lora.input(), &dpre));
        dx
    }
}

impl<S: Scalar> Module<S> for FusionHead<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.gate_m.collect_params(out);
        self.gate_p.collect_params(out);
        self.trunk.collect_params(out);
        for (a, o) in self.adapters.iter().zip(&self.outputs) {
            a.collect_params(out);
            o.collect_params(out);
        }
        out.push(&self.target_norm);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.gate_m.collect_params_mut(out);
        self.gate_p.collect_params_mut(out);
        self.trunk.collect_params_mut(out);
        for (a, o) in self.adapters.iter_mut().zip(self.outputs.iter_mut()) {
            a.collect_params_mut(out);
            o.collect_params_mut(out);
        }
        out.push(&mut self.target_norm);
    }
}
