use rand::Rng;

use crate::error::Result;
use crate::nn::ops::{self, ConvGeometry};
use crate::nn::{Module, Parameter, Tensor};
use crate::scalar::Scalar;

/// Fully connected layer, `W: [out × in]`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = (3.0 / input as f64).sqrt();
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::uniform(&[output, input], bound, rng)),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[output]))),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor<S>, bias: Option<Tensor<S>>) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Parameter::new(format!("{name}.bias"), b)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::linear(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value))
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let g = ops::linear_backward(x, &self.weight.value, dy);
        self.weight.accumulate_tensor(&g.dw);
        if let Some(b) = self.bias.as_mut() {
            b.accumulate_tensor(&g.db);
        }
        g.dx
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        if let Some(b) = self.bias.as_mut() {
            b.frozen = frozen;
        }
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

/// 1-D convolution layer with bias, `W: [Cout × Cin × K]`.
#[derive(Clone, Debug)]
pub struct Conv1d<S> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub geometry: ConvGeometry,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (cin * kernel) as f64).sqrt();
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::uniform(&[cout, cin, kernel], bound, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            geometry,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::conv1d(x, &self.weight.value, Some(&self.bias.value), self.geometry)
    }

    pub fn backward(&mut self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let g = ops::conv1d_backward(x, &self.weight.value, dy, self.geometry);
        self.weight.accumulate_tensor(&g.dw);
        self.bias.accumulate_tensor(&g.db);
        g.dx
    }
}

impl<S: Scalar> Module<S> for Conv1d<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Stack of `conv → relu` stages followed by mean pooling over time.
#[derive(Clone, Debug)]
pub struct ConvStack<S> {
    pub stages: Vec<Conv1d<S>>,
}

pub struct ConvStackCache<S> {
    /// Input to every stage plus the final relu output.
    acts: Vec<Tensor<S>>,
}

impl<S: Scalar> ConvStack<S> {
    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |c| c.out_channels())
    }

    /// Runs all stages; returns the un-pooled final activation and a cache.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvStackCache<S>)> {
        let mut acts = Vec::with_capacity(self.stages.len() + 1);
        let mut h = x.clone();
        for stage in &self.stages {
            let y = ops::relu(&stage.forward(&h)?);
            acts.push(h);
            h = y;
        }
        acts.push(h.clone());
        Ok((h, ConvStackCache { acts }))
    }

    /// Backward from a gradient on the final activation; returns `dL/dx`.
    pub fn backward(&mut self, cache: &ConvStackCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let mut g = dy.clone();
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            let g_pre = ops::relu_backward(&cache.acts[i + 1], &g);
            g = stage.backward(&cache.acts[i], &g_pre);
        }
        g
    }
}

impl<S: Scalar> Module<S> for ConvStack<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        self.stages.collect_params(out);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        self.stages.collect_params_mut(out);
    }
}
