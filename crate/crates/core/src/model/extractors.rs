//! Multi-model branch: five small, architecturally different encoders, each
//! behind its own downsampler, projected and concatenated into `F_m`.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::config::{ExtractorKind, ExtractorSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeometry};
use crate::nn::{Conv1d, ConvStack, Linear, Module, MultiHeadAttention, Parameter, Tensor};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::ConvStackCache;
use crate::scalar::Scalar;

/// Non-overlapping mean pooling along time with window `factor`.
pub fn adaptive_downsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    ops::mean_pool_windows(x, factor)
}

/// Centered moving average with replicate padding, per channel.
pub fn moving_average<S: Scalar>(x: &Tensor<S>, kernel: usize) -> Tensor<S> {
    let (c, t) = (x.rows(), x.cols());
    let left = (kernel - 1) / 2;
    let inv = S::one() / S::of(kernel as f64);
    let mut out = Vec::with_capacity(c * t);
    for ch in 0..c {
        let row = x.row(ch);
        let at = |i: isize| row[i.clamp(0, t as isize - 1) as usize];
        for i in 0..t as isize {
            let lo = i - left as isize;
            let s: S = (lo..lo + kernel as isize).map(at).sum();
            out.push(s * inv);
        }
    }
    Tensor::from_vec(&[c, t], out).expect("same shape")
}

/// `(trend, residual)` with `trend + residual == x`.
pub fn decompose<S: Scalar>(x: &Tensor<S>, kernel: usize) -> (Tensor<S>, Tensor<S>) {
    let trend = moving_average(x, kernel);
    let mut residual = x.clone();
    residual.add_scaled(&trend, -S::one());
    (trend, residual)
}

/// Dominant frequency bin (ignoring bins 0 and 1) of the mean-removed signal
/// and the corresponding period `round(n / bin)` in samples.
pub fn dominant_period(signal: &[f64]) -> Option<(usize, usize)> {
    let n = signal.len();
    if n < 8 {
        return None;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let bin = (2..=n / 2).max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()).then(b.cmp(&a)))?;
    if buf[bin].norm_sqr() == 0.0 {
        return None;
    }
    Some((bin, (n as f64 / bin as f64).round() as usize))
}

/// Fixed sinusoidal position table `[n × d]`.
pub fn sinusoidal_positions<S: Scalar>(n: usize, d: usize) -> Tensor<S> {
    let mut out = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            out.push(S::of(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[n, d], out).expect("pe shape")
}

/// Non-overlapping patches of `[C × T]`: row `i` holds `x[c, i*p..(i+1)*p]`
/// for every channel in turn. A trailing partial patch is dropped.
pub fn patchify<S: Scalar>(x: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (c, t) = (x.rows(), x.cols());
    let n = t / p;
    if n == 0 {
        return Err(Error::shape("patchify", x.shape(), &[c, p]));
    }
    let mut out = Vec::with_capacity(n * c * p);
    for i in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&x.row(ch)[i * p..(i + 1) * p]);
        }
    }
    Tensor::from_vec(&[n, c * p], out)
}

fn flatten<S: Scalar>(x: Tensor<S>) -> Tensor<S> {
    Tensor::vector(x.into_data())
}

/// Period folding: cycles at the dominant period are encoded by a shared
/// conv, averaged, and encoded again along the phase axis.
#[derive(Clone, Debug)]
pub struct SpectralFold<S> {
    pub conv1: Conv1d<S>,
    pub conv2: Conv1d<S>,
}

pub struct SpectralFoldCache<S> {
    pub period: usize,
    cycles: Vec<Tensor<S>>,
    acts: Vec<Tensor<S>>,
    folded: Tensor<S>,
    out: Tensor<S>,
}

impl<S: Scalar> SpectralFold<S> {
    fn new<R: Rng + ?Sized>(name: &str, leads: usize, hidden: usize, d: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::new(&format!("{name}.conv1"), leads, hidden, 5, ConvGeometry::same(5, 1), rng),
            conv2: Conv1d::new(&format!("{name}.conv2"), hidden, d, 3, ConvGeometry::same(3, 1), rng),
        }
    }

    /// Period used for folding `x`: the dominant period of the lead average,
    /// clamped to `[8, T]`; the whole signal when no period is found.
    pub fn fold_period(x: &Tensor<S>) -> usize {
        let (c, t) = (x.rows(), x.cols());
        let avg: Vec<f64> = (0..t)
            .map(|i| (0..c).map(|ch| x.row(ch)[i].f64()).sum::<f64>() / c as f64)
            .collect();
        dominant_period(&avg).map_or(t, |(_, p)| p.clamp(8.min(t), t))
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, SpectralFoldCache<S>)> {
        let (c, t) = (x.rows(), x.cols());
        let period = Self::fold_period(x);
        let n = (t / period).max(1);
        let mut cycles = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n);
        let mut folded: Option<Tensor<S>> = None;
        for k in 0..n {
            let mut seg = Vec::with_capacity(c * period);
            for ch in 0..c {
                seg.extend_from_slice(&x.row(ch)[k * period..(k + 1) * period]);
            }
            let xc = Tensor::from_vec(&[c, period], seg)?;
            let a = ops::relu(&self.conv1.forward(&xc)?);
            match folded.as_mut() {
                Some(f) => f.add_assign(&a),
                None => folded = Some(a.clone()),
            }
            cycles.push(xc);
            acts.push(a);
        }
        let mut folded = folded.expect("at least one cycle");
        folded.scale(S::one() / S::of(n as f64));
        let out = ops::relu(&self.conv2.forward(&folded)?);
        let y = ops::mean_pool_time(&out);
        Ok((
            y,
            SpectralFoldCache {
                period,
                cycles,
                acts,
                folded,
                out,
            },
        ))
    }

    fn backward(&mut self, cache: &SpectralFoldCache<S>, dy: &Tensor<S>) {
        let dout = ops::mean_pool_time_backward(cache.out.shape(), dy);
        let dpre = ops::relu_backward(&cache.out, &dout);
        let mut dfold = self.conv2.backward(&cache.folded, &dpre);
        dfold.scale(S::one() / S::of(cache.cycles.len() as f64));
        for (xc, a) in cache.cycles.iter().zip(&cache.acts) {
            let d = ops::relu_backward(a, &dfold);
            self.conv1.backward(xc, &d);
        }
    }
}

impl<S: Scalar> Module<S> for SpectralFold<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.conv1.collect_params(out);
        self.conv2.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.conv1.collect_params_mut(out);
        self.conv2.collect_params_mut(out);
    }
}

/// Trend/residual decomposition with one linear map per component.
#[derive(Clone, Debug)]
pub struct LinearDecomp<S> {
    pub kernel: usize,
    pub bins: usize,
    pub trend_map: Linear<S>,
    pub residual_map: Linear<S>,
}

pub struct LinearDecompCache<S> {
    trend: Tensor<S>,
    pub residual: Tensor<S>,
}

impl<S: Scalar> LinearDecomp<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, d: usize, rng: &mut R) -> Self {
        let input = cfg.leads * cfg.decomp_bins;
        Self {
            kernel: cfg.trend_kernel,
            bins: cfg.decomp_bins,
            trend_map: Linear::new(&format!("{name}.trend"), input, d, true, rng),
            residual_map: Linear::new(&format!("{name}.residual"), input, d, false, rng),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LinearDecompCache<S>)> {
        let (trend, residual) = decompose(x, self.kernel);
        let trend = flatten(ops::adaptive_mean_pool(&trend, self.bins));
        let residual = flatten(ops::adaptive_mean_pool(&residual, self.bins));
        let mut y = self.trend_map.forward(&trend)?;
        y.add_assign(&self.residual_map.forward(&residual)?);
        Ok((y, LinearDecompCache { trend, residual }))
    }

    fn backward(&mut self, cache: &LinearDecompCache<S>, dy: &Tensor<S>) {
        self.trend_map.backward(&cache.trend, dy);
        self.residual_map.backward(&cache.residual, dy);
    }
}

impl<S: Scalar> Module<S> for LinearDecomp<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.trend_map.collect_params(out);
        self.residual_map.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.trend_map.collect_params_mut(out);
        self.residual_map.collect_params_mut(out);
    }
}

/// Patch embedding, positions, one residual self-attention block, mean.
#[derive(Clone, Debug)]
pub struct PatchAttention<S> {
    pub patch_len: usize,
    pub embed: Linear<S>,
    pub attn: MultiHeadAttention<S>,
}

pub struct PatchAttentionCache<S> {
    patches: Tensor<S>,
    attn: AttentionCache<S>,
}

impl<S: Scalar> PatchAttention<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            patch_len: cfg.patch_len,
            embed: Linear::new(&format!("{name}.embed"), cfg.leads * cfg.patch_len, d, true, rng),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), d, cfg.extractor_heads, rng)?,
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, PatchAttentionCache<S>)> {
        let patches = patchify(x, self.patch_len)?;
        let mut e = self.embed.forward(&patches)?;
        e.add_assign(&sinusoidal_positions(e.rows(), e.cols()));
        let (a, attn) = self.attn.forward(&e, &e, &e)?;
        let mut h = a;
        h.add_assign(&e);
        Ok((ops::mean_rows(&h), PatchAttentionCache { patches, attn }))
    }

    fn backward(&mut self, cache: &PatchAttentionCache<S>, dy: &Tensor<S>) {
        let dh = ops::mean_rows_backward(cache.patches.rows(), dy);
        let g = self.attn.backward(&cache.attn, &dh);
        let mut de = dh;
        de.add_assign(&g.dq_in);
        de.add_assign(&g.dk_in);
        de.add_assign(&g.dv_in);
        self.embed.backward(&cache.patches, &de);
    }
}

impl<S: Scalar> Module<S> for PatchAttention<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.embed.collect_params(out);
        self.attn.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.embed.collect_params_mut(out);
        self.attn.collect_params_mut(out);
    }
}

/// Attention over the seasonal part plus a linear map of the pooled trend.
#[derive(Clone, Debug)]
pub struct DecompAttention<S> {
    pub kernel: usize,
    pub bins: usize,
    pub seasonal: PatchAttention<S>,
    pub trend_map: Linear<S>,
}

pub struct DecompAttentionCache<S> {
    seasonal: PatchAttentionCache<S>,
    trend: Tensor<S>,
}

impl<S: Scalar> DecompAttention<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            kernel: cfg.trend_kernel,
            bins: cfg.decomp_bins,
            seasonal: PatchAttention::new(&format!("{name}.seasonal"), cfg, d, rng)?,
            trend_map: Linear::new(&format!("{name}.trend"), cfg.leads * cfg.decomp_bins, d, true, rng),
        })
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, DecompAttentionCache<S>)> {
        let (trend, seasonal) = decompose(x, self.kernel);
        let (mut y, sc) = self.seasonal.forward(&seasonal)?;
        let trend = flatten(ops::adaptive_mean_pool(&trend, self.bins));
        y.add_assign(&self.trend_map.forward(&trend)?);
        Ok((y, DecompAttentionCache { seasonal: sc, trend }))
    }

    fn backward(&mut self, cache: &DecompAttentionCache<S>, dy: &Tensor<S>) {
        self.seasonal.backward(&cache.seasonal, dy);
        self.trend_map.backward(&cache.trend, dy);
    }
}

impl<S: Scalar> Module<S> for DecompAttention<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.seasonal.collect_params(out);
        self.trend_map.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.seasonal.collect_params_mut(out);
        self.trend_map.collect_params_mut(out);
    }
}

/// Three strided conv + relu stages, then global average pooling.
#[derive(Clone, Debug)]
pub struct ConvEncoder<S> {
    pub stack: ConvStack<S>,
}

pub struct ConvEncoderCache<S> {
    stack: ConvStackCache<S>,
    out_shape: Vec<usize>,
}

impl<S: Scalar> ConvEncoder<S> {
    fn new<R: Rng + ?Sized>(name: &str, leads: usize, d: usize, rng: &mut R) -> Self {
        let plan = [(leads, 16, 7), (16, 32, 5), (32, d, 3)];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k))| {
                Conv1d::new(&format!("{name}.conv{i}"), cin, cout, k, ConvGeometry::new(2, 1, k / 2), rng)
            })
            .collect();
        Self {
            stack: ConvStack { stages },
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvEncoderCache<S>)> {
        let (h, stack) = self.stack.forward(x)?;
        Ok((
            ops::mean_pool_time(&h),
            ConvEncoderCache {
                stack,
                out_shape: h.shape().to_vec(),
            },
        ))
    }

    fn backward(&mut self, cache: &ConvEncoderCache<S>, dy: &Tensor<S>) {
        let dh = ops::mean_pool_time_backward(&cache.out_shape, dy);
        self.stack.backward(&cache.stack, &dh);
    }
}

impl<S: Scalar> Module<S> for ConvEncoder<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.stack.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.stack.collect_params_mut(out);
    }
}

#[derive(Clone, Debug)]
pub enum Extractor<S> {
    SpectralFold(SpectralFold<S>),
    LinearDecomp(LinearDecomp<S>),
    PatchTransformer(PatchAttention<S>),
    DecompAttention(DecompAttention<S>),
    ConvEncoder(ConvEncoder<S>),
}

pub enum ExtractorCache<S> {
    SpectralFold(SpectralFoldCache<S>),
    LinearDecomp(LinearDecompCache<S>),
    PatchTransformer(PatchAttentionCache<S>),
    DecompAttention(DecompAttentionCache<S>),
    ConvEncoder(ConvEncoderCache<S>),
}

impl<S: Scalar> ExtractorCache<S> {
    /// Folding period chosen by a spectral-fold extractor.
    pub fn period(&self) -> Option<usize> {
        match self {
            ExtractorCache::SpectralFold(c) => Some(c.period),
            _ => None,
        }
    }
}

impl<S: Scalar> Extractor<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, spec: &ExtractorSpec, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = spec.output_dim;
        Ok(match spec.kind {
            ExtractorKind::SpectralFold => {
                Extractor::SpectralFold(SpectralFold::new(name, cfg.leads, cfg.fold_channels, d, rng))
            }
            ExtractorKind::LinearDecomp => Extractor::LinearDecomp(LinearDecomp::new(name, cfg, d, rng)),
            ExtractorKind::PatchTransformer => Extractor::PatchTransformer(PatchAttention::new(name, cfg, d, rng)?),
            ExtractorKind::DecompAttention => Extractor::DecompAttention(DecompAttention::new(name, cfg, d, rng)?),
            ExtractorKind::ConvEncoder => Extractor::ConvEncoder(ConvEncoder::new(name, cfg.leads, d, rng)),
        })
    }

    /// Encodes an already downsampled `[C × T]` signal to `[d_k]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ExtractorCache<S>)> {
        Ok(match self {
            Extractor::SpectralFold(e) => {
                let (y, c) = e.forward(x)?;
                (y, ExtractorCache::SpectralFold(c))
            }
            Extractor::LinearDecomp(e) => {
                let (y, c) = e.forward(x)?;
                (y, ExtractorCache::LinearDecomp(c))
            }
            Extractor::PatchTransformer(e) => {
                let (y, c) = e.forward(x)?;
                (y, ExtractorCache::PatchTransformer(c))
            }
            Extractor::DecompAttention(e) => {
                let (y, c) = e.forward(x)?;
                (y, ExtractorCache::DecompAttention(c))
            }
            Extractor::ConvEncoder(e) => {
                let (y, c) = e.forward(x)?;
                (y, ExtractorCache::ConvEncoder(c))
            }
        })
    }

    pub fn backward(&mut self, cache: &ExtractorCache<S>, dy: &Tensor<S>) {
        match (self, cache) {
            (Extractor::SpectralFold(e), ExtractorCache::SpectralFold(c)) => e.backward(c, dy),
            (Extractor::LinearDecomp(e), ExtractorCache::LinearDecomp(c)) => e.backward(c, dy),
            (Extractor::PatchTransformer(e), ExtractorCache::PatchTransformer(c)) => e.backward(c, dy),
            (Extractor::DecompAttention(e), ExtractorCache::DecompAttention(c)) => e.backward(c, dy),
            (Extractor::ConvEncoder(e), ExtractorCache::ConvEncoder(c)) => e.backward(c, dy),
            _ => panic!("extractor cache does not match extractor kind"),
        }
    }
}

impl<S: Scalar> Module<S> for Extractor<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        match self {
            Extractor::SpectralFold(e) => e.collect_params(out),
            Extractor::LinearDecomp(e) => e.collect_params(out),
            Extractor::PatchTransformer(e) => e.collect_params(out),
            Extractor::DecompAttention(e) => e.collect_params(out),
            Extractor::ConvEncoder(e) => e.collect_params(out),
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        match self {
            Extractor::SpectralFold(e) => e.collect_params_mut(out),
            Extractor::LinearDecomp(e) => e.collect_params_mut(out),
            Extractor::PatchTransformer(e) => e.collect_params_mut(out),
            Extractor::DecompAttention(e) => e.collect_params_mut(out),
            Extractor::ConvEncoder(e) => e.collect_params_mut(out),
        }
    }
}

/// `concat_k(W_k F_k + b_k)` in extractor order.
pub fn project_and_concat<S: Scalar>(outputs: &[Tensor<S>], projections: &[Linear<S>]) -> Result<Tensor<S>> {
    if outputs.len() != projections.len() {
        return Err(Error::shape("project_and_concat", &[outputs.len()], &[projections.len()]));
    }
    let projected = outputs
        .iter()
        .zip(projections)
        .map(|(f, p)| p.forward(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&projected.iter().collect::<Vec<_>>()))
}

#[derive(Clone, Debug)]
pub struct MultiModelOutput<S> {
    /// Raw extractor outputs `F_k`, before projection.
    pub per_extractor: Vec<Tensor<S>>,
    /// `F_m`.
    pub fused: Tensor<S>,
}

pub struct MultiModelCache<S> {
    pub extractors: Vec<ExtractorCache<S>>,
}

#[derive(Clone, Debug)]
pub struct MultiModelBranch<S> {
    pub specs: Vec<ExtractorSpec>,
    pub extractors: Vec<Extractor<S>>,
    pub projections: Vec<Linear<S>>,
}

impl<S: Scalar> MultiModelBranch<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut extractors = Vec::new();
        let mut projections = Vec::new();
        for (i, spec) in cfg.extractors.iter().enumerate() {
            let name = format!("mm.{i}.{}", spec.kind.name());
            extractors.push(Extractor::new(&name, spec, cfg, rng)?);
            projections.push(Linear::new(&format!("{name}.proj"), spec.output_dim, spec.output_dim, true, rng));
        }
        Ok(Self {
            specs: cfg.extractors.clone(),
            extractors,
            projections,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.specs.iter().map(|s| s.output_dim).sum()
    }

    /// `x: [C × T]` (full rate) → `F_m`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(MultiModelOutput<S>, MultiModelCache<S>)> {
        let mut per_extractor = Vec::with_capacity(self.extractors.len());
        let mut caches = Vec::with_capacity(self.extractors.len());
        for (spec, ext) in self.specs.iter().zip(&self.extractors) {
            let ds = adaptive_downsample(x, spec.factor())?;
            let (f, c) = ext.forward(&ds)?;
            per_extractor.push(f);
            caches.push(c);
        }
        let fused = project_and_concat(&per_extractor, &self.projections)?;
        Ok((
            MultiModelOutput { per_extractor, fused },
            MultiModelCache { extractors: caches },
        ))
    }

    pub fn backward(&mut self, out: &MultiModelOutput<S>, cache: &MultiModelCache<S>, d_fused: &Tensor<S>) {
        let mut offset = 0;
        for (k, ext) in self.extractors.iter_mut().enumerate() {
            let d = self.specs[k].output_dim;
            let slice = Tensor::vector(d_fused.data()[offset..offset + d].to_vec());
            offset += d;
            let df = self.projections[k].backward(&out.per_extractor[k], &slice);
            ext.backward(&cache.extractors[k], &df);
        }
    }
}

impl<S: Scalar> Module<S> for MultiModelBranch<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        for (e, p) in self.extractors.iter().zip(&self.projections) {
            e.collect_params(out);
            p.collect_params(out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        for (e, p) in self.extractors.iter_mut().zip(self.projections.iter_mut()) {
            e.collect_params_mut(out);
            p.collect_params_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn downsample_lengths() {
        let x = Tensor::<f64>::filled(&[2, 5000], 0.7);
        let y = adaptive_downsample(&x, 4).unwrap();
        assert_eq!(y.shape(), &[2, 1250]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let z = Tensor::<f64>::from_vec(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(adaptive_downsample(&z, 1).unwrap(), z);
        assert_eq!(adaptive_downsample(&z, 2).unwrap().data(), &[1.5, 3.5, 5.0]);
        assert!(adaptive_downsample(&z, 0).is_err());
    }

    #[test]
    fn sinusoid_period() {
        let n = 1000;
        let period = 40.0;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / period).sin()).collect();
        let (bin, p) = dominant_period(&x).unwrap();
        assert_eq!(bin, 25);
        assert_eq!(p, 40);
    }

    #[test]
    fn constant_input_has_zero_residual() {
        let x = Tensor::<f64>::filled(&[2, 300], 3.25);
        let (trend, residual) = decompose(&x, 25);
        assert!(residual.data().iter().all(|&v| v == 0.0));
        assert!(trend.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn branch_layout() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mm = MultiModelBranch::<f64>::new(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 1000], 1.0, &mut rng);
        let (out, _) = mm.forward(&x).unwrap();
        assert_eq!(out.fused.len(), 320);
        assert!(out.per_extractor.iter().all(|f| f.len() == 64));
    }
}
