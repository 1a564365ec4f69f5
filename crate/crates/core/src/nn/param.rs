use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Trainable value plus its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Frozen parameters never accumulate gradient.
    pub frozen: bool,
    /// Set when a backward pass accumulated into `grad` since the last
    /// `zero_grad`. Optimizers skip untouched parameters.
    pub touched: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            frozen: false,
            touched: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
        self.touched = false;
    }

    pub fn accumulate(&mut self, g: &[S]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(g.len(), self.grad.len(), "grad length for {}", self.name);
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        self.touched = true;
    }

    pub fn accumulate_tensor(&mut self, g: &Tensor<S>) {
        self.accumulate(g.data());
    }
}

/// Anything that owns parameters. Visiting order is fixed and defines the
/// checkpoint layout and optimizer state indexing.
pub trait Module<S: Scalar> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>);

    fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = Vec::new();
        self.collect_params(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = Vec::new();
        self.collect_params_mut(&mut v);
        v
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

impl<S: Scalar> Module<S> for Parameter<S> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        out.push(self);
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        out.push(self);
    }
}

impl<S: Scalar, M: Module<S>> Module<S> for Vec<M> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        for m in self {
            m.collect_params(out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        for m in self {
            m.collect_params_mut(out);
        }
    }
}

impl<S: Scalar, M: Module<S>> Module<S> for Option<M> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Parameter<S>>) {
        if let Some(m) = self {
            m.collect_params(out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<S>>) {
        if let Some(m) = self {
            m.collect_params_mut(out);
        }
    }
}
