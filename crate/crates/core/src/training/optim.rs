//! First-order optimizers over a module's parameter list.
//!
//! Parameters that are frozen or received no gradient since the last
//! `zero_grad` are left alone, so a step driven by one task never moves
//! another task's private parameters.

use super::config::OptimizerConfig;
use crate::nn::{Module, Parameter};
use crate::scalar::Scalar;

pub trait Optimizer<S: Scalar> {
    /// Applies one update from the accumulated gradients.
    fn step(&mut self, params: &mut [&mut Parameter<S>]);

    fn learning_rate(&self) -> f64;

    /// Steps every parameter of `module` and clears its gradients.
    fn step_module<M: Module<S>>(&mut self, module: &mut M)
    where
        Self: Sized,
    {
        let mut params = module.params_mut();
        self.step(&mut params);
        for p in params {
            p.zero_grad();
        }
    }
}

fn trainable<S: Scalar>(p: &Parameter<S>) -> bool {
    p.touched && !p.frozen
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<S: Scalar> Optimizer<S> for Sgd {
    fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        let lr = S::of(self.lr);
        for p in params.iter_mut().filter(|p| trainable(p)) {
            let Parameter { value, grad, .. } = &mut **p;
            for (v, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                let upd = lr * g;
                if upd != S::zero() {
                    *v -= upd;
                }
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[derive(Clone, Debug, Default)]
struct AdamSlot<S> {
    m: Vec<S>,
    v: Vec<S>,
    /// Updates applied to this parameter so far.
    t: i32,
}

/// Adam with bias correction and a per-parameter step count.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<AdamSlot<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        if self.slots.len() < params.len() {
            self.slots.resize_with(params.len(), AdamSlot::default);
        }
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (eps, lr) = (S::of(self.eps), S::of(self.lr));
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            if !trainable(p) {
                continue;
            }
            if slot.m.len() != p.value.len() {
                slot.m = vec![S::zero(); p.value.len()];
                slot.v = vec![S::zero(); p.value.len()];
                slot.t = 0;
            }
            slot.t += 1;
            let c1 = S::one() - b1.powi(slot.t);
            let c2 = S::one() - b2.powi(slot.t);
            let Parameter { value, grad, .. } = &mut **p;
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut slot.m)
                .zip(&mut slot.v)
            {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                if upd != S::zero() {
                    *w -= upd;
                }
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Either optimizer, chosen by config.
#[derive(Clone, Debug)]
pub enum AnyOptimizer<S> {
    Sgd(Sgd),
    Adam(Adam<S>),
}

impl<S: Scalar> AnyOptimizer<S> {
    pub fn new(cfg: &OptimizerConfig, lr: f64) -> Self {
        match *cfg {
            OptimizerConfig::Sgd => AnyOptimizer::Sgd(Sgd { lr }),
            OptimizerConfig::Adam { beta1, beta2, eps } => AnyOptimizer::Adam(Adam::new(lr, beta1, beta2, eps)),
        }
    }
}

impl<S: Scalar> Optimizer<S> for AnyOptimizer<S> {
    fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        match self {
            AnyOptimizer::Sgd(o) => o.step(params),
            AnyOptimizer::Adam(o) => o.step(params),
        }
    }

    fn learning_rate(&self) -> f64 {
        match self {
            AnyOptimizer::Sgd(o) => <Sgd as Optimizer<S>>::learning_rate(o),
            AnyOptimizer::Adam(o) => o.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(v: Vec<f64>, g: Vec<f64>) -> Parameter<f64> {
        let mut p = Parameter::new("p", Tensor::vector(v));
        p.accumulate(&g);
        p
    }

    #[test]
    fn sgd_step() {
        let mut p = param(vec![1.0, 2.0], vec![0.5, -1.0]);
        Sgd { lr: 0.1 }.step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[0.95, 2.1]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = param(vec![1.0, 1.0], vec![3.0, -0.2]);
        Adam::new(0.01, 0.9, 0.999, 1e-8).step(&mut [&mut p]);
        assert!((p.value.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.value.data()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn untouched_and_frozen_parameters_stay_put() {
        let mut idle = Parameter::new("idle", Tensor::<f64>::vector(vec![1.0]));
        let mut frozen = param(vec![1.0], vec![1.0]);
        frozen.frozen = true;
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut [&mut idle, &mut frozen]);
        assert_eq!(idle.value.data(), &[1.0]);
        assert_eq!(frozen.value.data(), &[1.0]);
    }
}
