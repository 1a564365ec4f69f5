//! Finite-difference checks of every differentiable op and layer. Inputs are
//! promoted to parameters so their gradients are checked along with the
//! weights. Tensor outputs are reduced with a fixed random probe `c`, so
//! `L = <c, y>` and the upstream gradient is `c`.

use ecgmoe::model::config::ExtractorKind;
use ecgmoe::model::extractors::Extractor;
use ecgmoe::model::periodic::{ExpertBank, ExpertGate, PeriodicMoe};
use ecgmoe::model::ExtractorSpec;
use ecgmoe::nn::loss::{bce_with_logits, cross_entropy, mae, nt_xent};
use ecgmoe::nn::ops::{self, ConvGeometry};
use ecgmoe::nn::{
    grad_check, AttentionMode, Conv1d, ConvStack, GradCheckOptions, GradCheckReport, Linear, LoraLayer, Module,
    MultiHeadAttention, Parameter, Tensor, TokenMixer,
};
use ecgmoe::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tiny_config;

pub const OP_TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;
const COORDS: usize = 12;
// Probes and inputs are unit scale, so losses are O(1) and roundoff in a
// numeric gradient is about 1e-11. Zero gradients (key biases) need a floor.
const FLOOR: f64 = 1e-4;

pub struct Bundle<M> {
    pub inputs: Vec<Parameter<f64>>,
    pub module: M,
}

impl<M: Module<f64>> Module<f64> for Bundle<M> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<f64>>) {
        self.inputs.collect_params(out);
        self.module.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<f64>>) {
        self.inputs.collect_params_mut(out);
        self.module.collect_params_mut(out);
    }
}

pub struct NoParams;

impl Module<f64> for NoParams {
    fn collect_params<'a>(&'a self, _: &mut Vec<&'a Parameter<f64>>) {}
    fn collect_params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Parameter<f64>>) {}
}

fn input(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Parameter<f64> {
    Parameter::new(name, Tensor::uniform(shape, 1.0, rng))
}

fn bundle<M>(inputs: Vec<Parameter<f64>>, module: M) -> Bundle<M> {
    Bundle { inputs, module }
}

fn dot(y: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    assert_eq!(y.len(), c.len(), "probe shape");
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Moves every bias off zero so ReLU inputs do not sit on the kink.
pub fn jitter_biases<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    for p in m.params_mut() {
        if p.name.ends_with(".bias") {
            p.value = Tensor::uniform(p.value.shape(), 0.1, rng);
        }
    }
}

pub struct OpCheck {
    pub name: String,
    pub report: GradCheckReport,
}

fn run<M: Module<f64>>(
    out: &mut Vec<OpCheck>,
    name: impl Into<String>,
    seed: u64,
    mut m: M,
    f: impl FnMut(&mut M, bool) -> Result<f64>,
) -> Result<()> {
    let opts = GradCheckOptions::new(STEP, OP_TOL).sampled(COORDS, seed).with_floor(FLOOR);
    let report = grad_check(&mut m, f, &opts)?;
    out.push(OpCheck {
        name: name.into(),
        report,
    });
    Ok(())
}

/// All checks for one seed; shapes and geometries are drawn from the seed.
pub fn op_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // linear
    let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let c = Tensor::uniform(&[n, o], 1.0, &mut rng);
    let b = bundle(
        vec![input("x", &[n, i], &mut rng), input("w", &[o, i], &mut rng), input("b", &[o], &mut rng)],
        NoParams,
    );
    run(&mut out, "linear", seed, b, |m, g| {
        let [x, w, b] = &m.inputs[..] else { unreachable!() };
        let l = dot(&ops::linear(&x.value, &w.value, Some(&b.value))?, &c);
        if g {
            let gr = ops::linear_backward(&x.value, &w.value, &c);
            m.inputs[0].accumulate_tensor(&gr.dx);
            m.inputs[1].accumulate_tensor(&gr.dw);
            m.inputs[2].accumulate_tensor(&gr.db);
        }
        Ok(l)
    })?;

    // conv1d with random geometry
    let (cin, cout, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..6));
    let geom = ConvGeometry::new(rng.random_range(1..4), rng.random_range(1..4), rng.random_range(0..4));
    let t = (k - 1) * geom.dilation + 1 + rng.random_range(0..10);
    let out_len = geom.output_len(t, k)?;
    let c = Tensor::uniform(&[cout, out_len], 1.0, &mut rng);
    let b = bundle(
        vec![
            input("x", &[cin, t], &mut rng),
            input("w", &[cout, cin, k], &mut rng),
            input("b", &[cout], &mut rng),
        ],
        NoParams,
    );
    run(&mut out, format!("conv1d {geom:?} k={k}"), seed, b, |m, g| {
        let [x, w, b] = &m.inputs[..] else { unreachable!() };
        let l = dot(&ops::conv1d(&x.value, &w.value, Some(&b.value), geom)?, &c);
        if g {
            let gr = ops::conv1d_backward(&x.value, &w.value, &c, geom);
            m.inputs[0].accumulate_tensor(&gr.dx);
            m.inputs[1].accumulate_tensor(&gr.dw);
            m.inputs[2].accumulate_tensor(&gr.db);
        }
        Ok(l)
    })?;

    // relu
    let n = rng.random_range(1..12);
    let c = Tensor::uniform(&[n], 1.0, &mut rng);
    run(&mut out, "relu", seed, bundle(vec![input("x", &[n], &mut rng)], NoParams), |m, g| {
        let y = ops::relu(&m.inputs[0].value);
        if g {
            let dx = ops::relu_backward(&y, &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(dot(&y, &c))
    })?;

    // softmax over the last axis
    let (r, k) = (rng.random_range(1..4), rng.random_range(1..7));
    let c = Tensor::uniform(&[r, k], 1.0, &mut rng);
    let x = Parameter::new("x", Tensor::uniform(&[r, k], 3.0, &mut rng));
    run(&mut out, "softmax", seed, bundle(vec![x], NoParams), |m, g| {
        let y = ops::softmax(&m.inputs[0].value);
        if g {
            let dx = ops::softmax_backward(&y, &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(dot(&y, &c))
    })?;

    // mean pooling over time and over rows
    let (ch, t) = (rng.random_range(1..4), rng.random_range(1..9));
    let c = Tensor::uniform(&[ch], 1.0, &mut rng);
    run(&mut out, "mean_pool_time", seed, bundle(vec![input("x", &[ch, t], &mut rng)], NoParams), |m, g| {
        let y = ops::mean_pool_time(&m.inputs[0].value);
        if g {
            let dx = ops::mean_pool_time_backward(&[ch, t], &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(dot(&y, &c))
    })?;
    let c = Tensor::uniform(&[t], 1.0, &mut rng);
    run(&mut out, "mean_rows", seed, bundle(vec![input("x", &[ch, t], &mut rng)], NoParams), |m, g| {
        let y = ops::mean_rows(&m.inputs[0].value);
        if g {
            let dx = ops::mean_rows_backward(ch, &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(dot(&y, &c))
    })?;

    // losses
    let n = rng.random_range(1..6);
    let target = Tensor::uniform(&[n], 1.0, &mut rng);
    run(&mut out, "mae", seed, bundle(vec![input("pred", &[n], &mut rng)], NoParams), |m, g| {
        let (l, d) = mae(&m.inputs[0].value, &target)?;
        if g {
            m.inputs[0].accumulate_tensor(&d);
        }
        Ok(l)
    })?;
    let soft: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let soft = Tensor::vector(soft);
    let logits = Parameter::new("logits", Tensor::uniform(&[n], 4.0, &mut rng));
    run(&mut out, "bce_with_logits", seed, bundle(vec![logits], NoParams), |m, g| {
        let (l, d) = bce_with_logits(&m.inputs[0].value, &soft)?;
        if g {
            m.inputs[0].accumulate_tensor(&d);
        }
        Ok(l)
    })?;
    let k = rng.random_range(2..16);
    let class = rng.random_range(0..k);
    let logits = Parameter::new("logits", Tensor::uniform(&[k], 4.0, &mut rng));
    run(&mut out, "cross_entropy", seed, bundle(vec![logits], NoParams), |m, g| {
        let (l, d) = cross_entropy(&m.inputs[0].value, class)?;
        if g {
            m.inputs[0].accumulate_tensor(&d);
        }
        Ok(l)
    })?;
    let (n, d) = (rng.random_range(2..6), rng.random_range(1..6));
    let tau = rng.random_range(0.1..1.0);
    let b = bundle(vec![input("z1", &[n, d], &mut rng), input("z2", &[n, d], &mut rng)], NoParams);
    run(&mut out, "nt_xent", seed, b, |m, g| {
        let r = nt_xent(&m.inputs[0].value, &m.inputs[1].value, tau)?;
        if g {
            m.inputs[0].accumulate_tensor(&r.dz1);
            m.inputs[1].accumulate_tensor(&r.dz2);
        }
        Ok(r.loss)
    })?;

    // layers
    let (n, i, o) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let c = Tensor::uniform(&[n, o], 1.0, &mut rng);
    let mut layer = Linear::new("lin", i, o, true, &mut rng);
    jitter_biases(&mut layer, &mut rng);
    run(&mut out, "Linear", seed, bundle(vec![input("x", &[n, i], &mut rng)], layer), |m, g| {
        let x = m.inputs[0].value.clone();
        let l = dot(&m.module.forward(&x)?, &c);
        if g {
            let dx = m.module.backward(&x, &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(l)
    })?;

    let (cin, width, k) = (rng.random_range(1..3), rng.random_range(1..4), [3, 5, 7][rng.random_range(0..3)]);
    let dil = rng.random_range(1..3);
    let g1 = ConvGeometry::same(k, dil);
    let mut stack = ConvStack {
        stages: vec![
            Conv1d::new("s.conv0", cin, width, k, g1, &mut rng),
            Conv1d::new("s.conv1", width, width, k, g1, &mut rng),
        ],
    };
    jitter_biases(&mut stack, &mut rng);
    let t = rng.random_range(4..20);
    let c = Tensor::uniform(&[width, t], 1.0, &mut rng);
    run(&mut out, "ConvStack", seed, bundle(vec![input("x", &[cin, t], &mut rng)], stack), |m, g| {
        let x = m.inputs[0].value.clone();
        let (y, cache) = m.module.forward(&x)?;
        if g {
            let dx = m.module.backward(&cache, &c);
            m.inputs[0].accumulate_tensor(&dx);
        }
        Ok(dot(&y, &c))
    })?;

    for frozen in [false, true] {
        let (i, o) = (rng.random_range(2..7), rng.random_range(2..7));
        let rank = rng.random_range(1..=i.min(o));
        let mut lora = LoraLayer::new("lora", i, o, rank, 4.0, frozen, &mut rng)?;
        lora.adapter.b.value = Tensor::uniform(lora.adapter.b.shape(), 0.5, &mut rng);
        let c = Tensor::uniform(&[o], 1.0, &mut rng);
        let name = if frozen { "LoraLayer (frozen base)" } else { "LoraLayer" };
        run(&mut out, name, seed, bundle(vec![input("x", &[i], &mut rng)], lora), |m, g| {
            let x = m.inputs[0].value.clone();
            let (y, cache) = m.module.forward(&x)?;
            if g {
                let dx = m.module.backward(&cache, &c);
                m.inputs[0].accumulate_tensor(&dx);
            }
            Ok(dot(&y, &c))
        })?;
    }

    let heads = rng.random_range(1..4);
    let d = heads * rng.random_range(1..4);
    let (nq, nk) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut mha = MultiHeadAttention::new("mha", d, heads, &mut rng)?;
    jitter_biases(&mut mha, &mut rng);
    let c = Tensor::uniform(&[nq, d], 1.0, &mut rng);
    let inputs = vec![input("q", &[nq, d], &mut rng), input("k", &[nk, d], &mut rng), input("v", &[nk, d], &mut rng)];
    run(&mut out, "MultiHeadAttention", seed, bundle(inputs, mha), |m, g| {
        let (q, k, v) = (m.inputs[0].value.clone(), m.inputs[1].value.clone(), m.inputs[2].value.clone());
        let (y, cache) = m.module.forward(&q, &k, &v)?;
        if g {
            let gr = m.module.backward(&cache, &c);
            m.inputs[0].accumulate_tensor(&gr.dq_in);
            m.inputs[1].accumulate_tensor(&gr.dk_in);
            m.inputs[2].accumulate_tensor(&gr.dv_in);
        }
        Ok(dot(&y, &c))
    })?;

    for mode in [AttentionMode::SelfAttention, AttentionMode::Cross, AttentionMode::Hybrid] {
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let n = rng.random_range(1..6);
        let mut mixer = TokenMixer::new("mix", mode, d, heads, &mut rng)?;
        jitter_biases(&mut mixer, &mut rng);
        let c = Tensor::uniform(&[d], 1.0, &mut rng);
        let inputs = vec![input("tokens", &[n, d], &mut rng), input("query", &[1, d], &mut rng)];
        run(&mut out, format!("TokenMixer {}", mode.as_str()), seed, bundle(inputs, mixer), |m, g| {
            let (tok, q) = (m.inputs[0].value.clone(), m.inputs[1].value.clone());
            let (y, cache) = m.module.forward(&tok, &q)?;
            if g {
                let (dt, dq) = m.module.backward(&cache, &c);
                m.inputs[0].accumulate_tensor(&dt);
                m.inputs[1].accumulate_tensor(&dq);
            }
            Ok(dot(&y, &c))
        })?;
    }

    // model components, at the tiny test dimensions
    let cfg = tiny_config();
    let gate = ExpertGate::new(&cfg, &mut rng);
    let stats = Tensor::uniform(&[cfg.stats_dim()], 1.0, &mut rng);
    let c = Tensor::uniform(&[5], 1.0, &mut rng);
    let d_t = cfg.d_t;
    run(&mut out, "ExpertGate", seed, bundle(vec![input("e_t", &[d_t], &mut rng)], gate), |m, g| {
        let e = m.inputs[0].value.clone();
        let (y, cache) = m.module.forward(&stats, &e)?;
        if g {
            let de = m.module.backward(&cache, &c, d_t);
            m.inputs[0].accumulate_tensor(&de);
        }
        Ok(dot(&y, &c))
    })?;

    let mut pe = PeriodicMoe::new(&cfg, &mut rng)?;
    jitter_biases(&mut pe, &mut rng);
    let integ = bundle(vec![input("experts", &[5, cfg.d_e], &mut rng), input("gate", &[5], &mut rng)], pe);
    let c = Tensor::uniform(&[cfg.d_p], 1.0, &mut rng);
    run(&mut out, "PeriodicMoe::integrate", seed, integ, |m, g| {
        let (e, w) = (m.inputs[0].value.clone(), m.inputs[1].value.clone());
        let (y, cache) = m.module.integrate(&e, &w)?;
        if g {
            let (de, dw) = m.module.integrate_backward(&cache, &c);
            m.inputs[0].accumulate_tensor(&de);
            m.inputs[1].accumulate_tensor(&dw);
        }
        Ok(dot(&y.f_periodic, &c))
    })?;

    let mut bank = ExpertBank::new(&cfg, &mut rng);
    jitter_biases(&mut bank, &mut rng);
    let n_beats = rng.random_range(2..6);
    let beats = Tensor::uniform(&[n_beats, cfg.beat_len], 1.0, &mut rng);
    let rr: Vec<f64> = (0..n_beats).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = Tensor::uniform(&[5, cfg.d_e], 1.0, &mut rng);
    run(&mut out, "ExpertBank", seed, bank, |m, g| {
        let (y, cache) = m.forward(&beats, &rr)?;
        if g {
            m.backward(&cache, &c);
        }
        Ok(dot(&y, &c))
    })?;

    for kind in ExtractorKind::ALL {
        let spec = ExtractorSpec {
            kind,
            downsample_factor: None,
            output_dim: 8,
        };
        let mut ex = Extractor::new(kind.name(), &spec, &cfg, &mut rng)?;
        jitter_biases(&mut ex, &mut rng);
        let t = rng.random_range(64..160);
        let x = signal_like(t, &mut rng);
        let c = Tensor::uniform(&[8], 1.0, &mut rng);
        run(&mut out, format!("extractor {}", kind.name()), seed, ex, |m, g| {
            let (y, cache) = m.forward(&x)?;
            if g {
                m.backward(&cache, &c);
            }
            Ok(dot(&y, &c))
        })?;
    }
    Ok(out)
}

/// A noisy periodic `[1 × t]` input, so the spectral fold finds a period.
fn signal_like(t: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let period = rng.random_range(8.0..24.0);
    let data = (0..t)
        .map(|i| (std::f64::consts::TAU * i as f64 / period).sin() + 0.3 * rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(&[1, t], data).expect("signal shape")
}
