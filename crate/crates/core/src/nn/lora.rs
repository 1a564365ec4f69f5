//! Low-rank adapters on a (possibly frozen) dense base layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::ops;
use crate::nn::{Module, Parameter, Tensor};
use crate::scalar::Scalar;

/// Low-rank delta `(alpha / rank) · B·A`. `B` starts at zero so a fresh
/// adapter leaves its base layer's output unchanged.
#[derive(Clone, Debug)]
pub struct LoraAdapter<S> {
    /// `[rank × in]`
    pub a: Parameter<S>,
    /// `[out × rank]`
    pub b: Parameter<S>,
    pub alpha: f64,
}

pub struct LoraCache<S> {
    x: Tensor<S>,
    ax: Tensor<S>,
}

impl<S> LoraCache<S> {
    /// The adapter's input.
    pub fn input(&self) -> &Tensor<S> {
        &self.x
    }
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > input.min(output) {
            return Err(Error::InvalidHyper(format!(
                "LoRA rank {rank} must be in [1, min({input}, {output})]"
            )));
        }
        let bound = (1.0 / input as f64).sqrt();
        Ok(Self {
            a: Parameter::new(format!("{name}.lora_a"), Tensor::uniform(&[rank, input], bound, rng)),
            b: Parameter::new(format!("{name}.lora_b"), Tensor::zeros(&[output, rank])),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> S {
        S::of(self.alpha / self.rank() as f64)
    }

    /// Adapter contribution only: `scale · B·(A·x)`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LoraCache<S>)> {
        let ax = ops::linear(x, &self.a.value, None)?;
        let mut y = ops::linear(&ax, &self.b.value, None)?;
        y.scale(self.scale());
        Ok((
            y,
            LoraCache {
                x: x.clone(),
                ax,
            },
        ))
    }

    pub fn backward(&mut self, cache: &LoraCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let dys = dy.scaled(self.scale());
        let gb = ops::linear_backward(&cache.ax, &self.b.value, &dys);
        self.b.accumulate_tensor(&gb.dw);
        let ga = ops::linear_backward(&cache.x, &self.a.value, &gb.dx);
        self.a.accumulate_tensor(&ga.dw);
        ga.dx
    }
}

impl<S: Scalar> Module<S> for LoraAdapter<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        out.push(&self.a);
        out.push(&self.b);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        out.push(&mut self.a);
        out.push(&mut self.b);
    }
}

/// `y = base(x) + adapter(x)` with the base optionally frozen.
pub fn lora_forward<S: Scalar>(
    base: &Linear<S>,
    adapter: &LoraAdapter<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, LoraCache<S>)> {
    let mut y = base.forward(x)?;
    let (delta, cache) = adapter.forward(x)?;
    if delta.len() != y.len() {
        return Err(Error::shape("lora_forward", y.shape(), delta.shape()));
    }
    y.add_assign(&delta);
    Ok((y, cache))
}

/// Backward of [`lora_forward`]; frozen base parameters receive nothing.
pub fn lora_backward<S: Scalar>(
    base: &mut Linear<S>,
    adapter: &mut LoraAdapter<S>,
    cache: &LoraCache<S>,
    dy: &Tensor<S>,
) -> Tensor<S> {
    let mut dx = base.backward(&cache.x, dy);
    dx.add_assign(&adapter.backward(cache, dy));
    dx
}

/// A dense layer with its own adapter.
#[derive(Clone, Debug)]
pub struct LoraLayer<S> {
    pub base: Linear<S>,
    pub adapter: LoraAdapter<S>,
}

impl<S: Scalar> LoraLayer<S> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        rank: usize,
        alpha: f64,
        frozen_base: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut base = Linear::new(name, input, output, true, rng);
        base.set_frozen(frozen_base);
        Ok(Self {
            base,
            adapter: LoraAdapter::new(name, input, output, rank, alpha, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, LoraCache<S>)> {
        lora_forward(&self.base, &self.adapter, x)
    }

    pub fn backward(&mut self, cache: &LoraCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        lora_backward(&mut self.base, &mut self.adapter, cache, dy)
    }
}

impl<S: Scalar> Module<S> for LoraLayer<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.base.collect_params(out);
        self.adapter.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.base.collect_params_mut(out);
        self.adapter.collect_params_mut(out);
    }
}
