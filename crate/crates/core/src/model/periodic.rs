//! Period-aware expert network: morphology experts over beats, rhythm experts
//! over the beat sequence, a task-conditioned softmax gate and attention
//! integration of the gated expert tokens.

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::layers::ConvStackCache;
use crate::nn::ops::{self, ConvGeometry};
use crate::nn::attention::MixerCache;
use crate::nn::{AttentionMap, Conv1d, ConvStack, Linear, Module, Parameter, Tensor, TokenMixer};
use crate::scalar::Scalar;

pub const NUM_EXPERTS: usize = 5;
pub const NUM_MORPH: usize = 3;

fn conv_stack<S: Scalar, R: Rng + ?Sized>(
    name: &str,
    cin: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    rng: &mut R,
) -> ConvStack<S> {
    let g = ConvGeometry::same(kernel, dilation);
    ConvStack {
        stages: vec![
            Conv1d::new(&format!("{name}.conv0"), cin, width, kernel, g, rng),
            Conv1d::new(&format!("{name}.conv1"), width, width, kernel, g, rng),
        ],
    }
}

/// Conv stack applied to every beat independently; per-beat features are
/// mean-pooled over time, then averaged over beats.
#[derive(Clone, Debug)]
pub struct MorphologyExpert<S> {
    pub stack: ConvStack<S>,
    pub out: Linear<S>,
}

/// Dilated conv stack over the beat sequence.
#[derive(Clone, Debug)]
pub struct RhythmExpert<S> {
    pub stack: ConvStack<S>,
    pub out: Linear<S>,
}

struct MorphCache<S> {
    stacks: Vec<ConvStackCache<S>>,
    act_shape: Vec<usize>,
    pooled: Tensor<S>,
}

struct RhythmCache<S> {
    stack: ConvStackCache<S>,
    act_shape: Vec<usize>,
    pooled: Tensor<S>,
}

pub struct ExpertCache<S> {
    morph: Vec<MorphCache<S>>,
    rhythm: Vec<RhythmCache<S>>,
    /// `[B × 3F]` per-beat morphology embeddings.
    pub beat_embeddings: Tensor<S>,
}

/// Three morphology and two rhythm experts.
#[derive(Clone, Debug)]
pub struct ExpertBank<S> {
    pub morph: Vec<MorphologyExpert<S>>,
    pub rhythm: Vec<RhythmExpert<S>>,
    width: usize,
}

impl<S: Scalar> ExpertBank<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let f = cfg.expert_channels;
        let morph = cfg
            .morph_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| MorphologyExpert {
                stack: conv_stack(&format!("pe.morph{i}"), 1, f, k, 1, rng),
                out: Linear::new(&format!("pe.morph{i}.out"), f, cfg.d_e, true, rng),
            })
            .collect();
        let rhythm = cfg
            .rhythm_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| RhythmExpert {
                stack: conv_stack(&format!("pe.rhythm{i}"), NUM_MORPH * f + 1, f, 3, d, rng),
                out: Linear::new(&format!("pe.rhythm{i}.out"), f, cfg.d_e, true, rng),
            })
            .collect();
        Self { morph, rhythm, width: f }
    }

    /// `beats: [B × L]`, `rr_feature: [B]` → expert outputs `[5 × d_e]`.
    pub fn forward(&self, beats: &Tensor<S>, rr_feature: &[S]) -> Result<(Tensor<S>, ExpertCache<S>)> {
        let b = beats.rows();
        if b < 2 {
            return Err(Error::InsufficientPeaks { found: b });
        }
        if rr_feature.len() != b {
            return Err(Error::shape("run_experts", &[rr_feature.len()], &[b]));
        }
        let f = self.width;
        let l = beats.cols();
        let mut outputs = Vec::with_capacity(NUM_EXPERTS);
        let mut morph_caches = Vec::with_capacity(NUM_MORPH);
        // Rhythm input [3F + 1 × B]: embeddings of every morphology expert,
        // then the RR feature.
        let mut seq = vec![S::zero(); (NUM_MORPH * f + 1) * b];
        let mut emb = vec![S::zero(); b * NUM_MORPH * f];
        for (m, expert) in self.morph.iter().enumerate() {
            let mut pooled = vec![S::zero(); f];
            let mut stacks = Vec::with_capacity(b);
            let mut act_shape = Vec::new();
            for i in 0..b {
                let x = Tensor::from_vec(&[1, l], beats.row(i).to_vec())?;
                let (h, c) = expert.stack.forward(&x)?;
                let e = ops::mean_pool_time(&h);
                for (j, &v) in e.data().iter().enumerate() {
                    pooled[j] += v;
                    seq[(m * f + j) * b + i] = v;
                    emb[i * NUM_MORPH * f + m * f + j] = v;
                }
                act_shape = h.shape().to_vec();
                stacks.push(c);
            }
            let inv = S::one() / S::of(b as f64);
            let pooled = Tensor::vector(pooled.into_iter().map(|v| v * inv).collect());
            outputs.push(expert.out.forward(&pooled)?);
            morph_caches.push(MorphCache {
                stacks,
                act_shape,
                pooled,
            });
        }
        seq[NUM_MORPH * f * b..].copy_from_slice(rr_feature);
        let seq = Tensor::from_vec(&[NUM_MORPH * f + 1, b], seq)?;
        let mut rhythm_caches = Vec::with_capacity(self.rhythm.len());
        for expert in &self.rhythm {
            let (h, c) = expert.stack.forward(&seq)?;
            let pooled = ops::mean_pool_time(&h);
            outputs.push(expert.out.forward(&pooled)?);
            rhythm_caches.push(RhythmCache {
                stack: c,
                act_shape: h.shape().to_vec(),
                pooled,
            });
        }
        let rows: Vec<&[S]> = outputs.iter().map(|t| t.data()).collect();
        Ok((
            Tensor::stack_rows(&rows)?,
            ExpertCache {
                morph: morph_caches,
                rhythm: rhythm_caches,
                beat_embeddings: Tensor::from_vec(&[b, NUM_MORPH * f], emb)?,
            },
        ))
    }

    /// Backward from `d_outputs: [5 × d_e]`.
    pub fn backward(&mut self, cache: &ExpertCache<S>, d_outputs: &Tensor<S>) {
        let f = self.width;
        let b = cache.beat_embeddings.rows();
        let mut d_seq: Option<Tensor<S>> = None;
        for (r, expert) in self.rhythm.iter_mut().enumerate() {
            let c = &cache.rhythm[r];
            let dy = Tensor::vector(d_outputs.row(NUM_MORPH + r).to_vec());
            let dp = expert.out.backward(&c.pooled, &dy);
            let dh = ops::mean_pool_time_backward(&c.act_shape, &dp);
            let dx = expert.stack.backward(&c.stack, &dh);
            match d_seq.as_mut() {
                Some(d) => d.add_assign(&dx),
                None => d_seq = Some(dx),
            }
        }
        let inv = S::one() / S::of(b as f64);
        for (m, expert) in self.morph.iter_mut().enumerate() {
            let c = &cache.morph[m];
            let dy = Tensor::vector(d_outputs.row(m).to_vec());
            let dp = expert.out.backward(&c.pooled, &dy);
            for i in 0..b {
                let de: Vec<S> = (0..f)
                    .map(|j| {
                        let via_rhythm = d_seq.as_ref().map_or(S::zero(), |d| d.data()[(m * f + j) * b + i]);
                        dp.data()[j] * inv + via_rhythm
                    })
                    .collect();
                let dh = ops::mean_pool_time_backward(&c.act_shape, &Tensor::vector(de));
                expert.stack.backward(&c.stacks[i], &dh);
            }
        }
    }
}

impl<S: Scalar> Module<S> for ExpertBank<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        for e in &self.morph {
            e.stack.collect_params(out);
            e.out.collect_params(out);
        }
        for e in &self.rhythm {
            e.stack.collect_params(out);
            e.out.collect_params(out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        for e in &mut self.morph {
            e.stack.collect_params_mut(out);
            e.out.collect_params_mut(out);
        }
        for e in &mut self.rhythm {
            e.stack.collect_params_mut(out);
            e.out.collect_params_mut(out);
        }
    }
}

/// `g = softmax(U_p [stats ⊕ e_t])`, no bias.
#[derive(Clone, Debug)]
pub struct ExpertGate<S> {
    pub u_p: Parameter<S>,
    pub task_conditioned: bool,
}

pub struct GateCache<S> {
    input: Tensor<S>,
    pub weights: Tensor<S>,
}

impl<S: Scalar> ExpertGate<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let input = cfg.stats_dim() + if cfg.task_conditioned_gate { cfg.d_t } else { 0 };
        let bound = (1.0 / input as f64).sqrt();
        Self {
            u_p: Parameter::new("pe.gate.u_p", Tensor::uniform(&[NUM_EXPERTS, input], bound, rng)),
            task_conditioned: cfg.task_conditioned_gate,
        }
    }

    pub fn forward(&self, stats: &Tensor<S>, task_embedding: &Tensor<S>) -> Result<(Tensor<S>, GateCache<S>)> {
        let input = if self.task_conditioned {
            Tensor::concat(&[stats, task_embedding])
        } else {
            stats.clone()
        };
        let logits = ops::linear(&input, &self.u_p.value, None)?;
        let weights = ops::softmax(&logits);
        Ok((weights.clone(), GateCache { input, weights }))
    }

    /// Returns the gradient with respect to the task embedding (zeros when
    /// the gate is not task-conditioned).
    pub fn backward(&mut self, cache: &GateCache<S>, d_weights: &Tensor<S>, d_t: usize) -> Tensor<S> {
        let dz = ops::softmax_backward(&cache.weights, d_weights);
        let g = ops::linear_backward(&cache.input, &self.u_p.value, &dz);
        self.u_p.accumulate_tensor(&g.dw);
        if self.task_conditioned {
            let n = g.dx.len();
            Tensor::vector(g.dx.data()[n - d_t..].to_vec())
        } else {
            Tensor::zeros(&[d_t])
        }
    }
}

#[derive(Clone, Debug)]
pub struct PeriodicOutput<S> {
    pub f_periodic: Tensor<S>,
    pub gate_weights: Tensor<S>,
    pub attention: Vec<AttentionMap<S>>,
}

pub struct IntegrateCache<S> {
    experts: Tensor<S>,
    gate: Tensor<S>,
    mixer: MixerCache<S>,
    mixed: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct PeriodicMoe<S> {
    pub experts: ExpertBank<S>,
    pub gate: ExpertGate<S>,
    pub mixer: TokenMixer<S>,
    pub out: Linear<S>,
}

impl<S: Scalar> PeriodicMoe<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            experts: ExpertBank::new(cfg, rng),
            gate: ExpertGate::new(cfg, rng),
            mixer: TokenMixer::new("pe.mixer", cfg.attention_mode, cfg.d_e, cfg.attention_heads, rng)?,
            out: Linear::new("pe.out", cfg.d_e, cfg.d_p, true, rng),
        })
    }

    /// Gates the expert outputs into five tokens, mixes them with attention
    /// (the rhythm tokens' mean is the query) and projects to `d_p`.
    pub fn integrate(&self, experts: &Tensor<S>, gate: &Tensor<S>) -> Result<(PeriodicOutput<S>, IntegrateCache<S>)> {
        if experts.shape() != [NUM_EXPERTS, self.mixer.self_attn.dim()] || gate.len() != NUM_EXPERTS {
            return Err(Error::shape("integrate", experts.shape(), gate.shape()));
        }
        let mut tokens = experts.clone();
        for i in 0..NUM_EXPERTS {
            let g = gate.data()[i];
            tokens.row_mut(i).iter_mut().for_each(|v| *v *= g);
        }
        let half = S::of(0.5);
        let query: Vec<S> = tokens.row(3).iter().zip(tokens.row(4)).map(|(&a, &b)| (a + b) * half).collect();
        let query = Tensor::from_vec(&[1, query.len()], query)?;
        let (mixed, mixer) = self.mixer.forward(&tokens, &query)?;
        let f_periodic = self.out.forward(&mixed)?;
        Ok((
            PeriodicOutput {
                f_periodic,
                gate_weights: gate.clone(),
                attention: mixer.attention_maps(),
            },
            IntegrateCache {
                experts: experts.clone(),
                gate: gate.clone(),
                mixer,
                mixed,
            },
        ))
    }

    /// Returns `(d_experts [5 × d_e], d_gate [5])`.
    pub fn integrate_backward(&mut self, cache: &IntegrateCache<S>, d_fp: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let d_mixed = self.out.backward(&cache.mixed, d_fp);
        let (mut d_tokens, d_query) = self.mixer.backward(&cache.mixer, &d_mixed);
        let half = S::of(0.5);
        for r in [3, 4] {
            for (t, &q) in d_tokens.row_mut(r).iter_mut().zip(d_query.data()) {
                *t += q * half;
            }
        }
        let mut d_experts = d_tokens.clone();
        let mut d_gate = Vec::with_capacity(NUM_EXPERTS);
        for i in 0..NUM_EXPERTS {
            let g = cache.gate.data()[i];
            d_experts.row_mut(i).iter_mut().for_each(|v| *v *= g);
            d_gate.push(d_tokens.row(i).iter().zip(cache.experts.row(i)).map(|(&a, &b)| a * b).sum());
        }
        (d_experts, Tensor::vector(d_gate))
    }
}

impl<S: Scalar> Module<S> for ExpertGate<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        out.push(&self.u_p);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        out.push(&mut self.u_p);
    }
}

impl<S: Scalar> Module<S> for PeriodicMoe<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.experts.collect_params(out);
        self.gate.collect_params(out);
        self.mixer.collect_params(out);
        self.out.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.experts.collect_params_mut(out);
        self.gate.collect_params_mut(out);
        self.mixer.collect_params_mut(out);
        self.out.collect_params_mut(out);
    }
}
