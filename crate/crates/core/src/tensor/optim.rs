use std::sync::atomic::{AtomicU64, Ordering};

use super::{Grads, Tensor};
use crate::error::{Error, Result};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// A named tensor owned by a model, with its gradient, Adam moments and an
/// optional Polyak (exponential moving average) shadow.
#[derive(Debug)]
pub struct Parameter {
    key: u64,
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
    pub polyak_shadow: Option<Vec<f64>>,
    pub polyak_decay: f64,
}

impl Clone for Parameter {
    /// Clones get a fresh key so that a copy and its original can be bound
    /// on the same tape without their gradients being merged.
    fn clone(&self) -> Self {
        Parameter {
            key: fresh_key(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
            moment1: self.moment1.clone(),
            moment2: self.moment2.clone(),
            polyak_shadow: self.polyak_shadow.clone(),
            polyak_decay: self.polyak_decay,
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            key: fresh_key(),
            name: name.into(),
            grad: Tensor::zeros(value.shape().to_vec()),
            value,
            trainable: true,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            polyak_shadow: None,
            polyak_decay: 0.0,
        }
    }

    /// A parameter that is saved with the model but never updated by Adam.
    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Parameter::new(name, value);
        p.trainable = false;
        p
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds the gradient recorded for this parameter, if any.
    pub fn accumulate(&mut self, grads: &Grads) {
        if let Some(g) = grads.param(self.key) {
            self.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }

    pub fn enable_polyak(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("polyak decay {decay} outside [0, 1)")));
        }
        self.polyak_decay = decay;
        self.polyak_shadow = Some(self.value.data().to_vec());
        Ok(())
    }

    fn update_shadow(&mut self) {
        if let Some(shadow) = &mut self.polyak_shadow {
            let d = self.polyak_decay;
            for (s, v) in shadow.iter_mut().zip(self.value.data()) {
                *s = d * *s + (1.0 - d) * v;
            }
        }
    }

    /// Replaces the live value with the Polyak average (evaluation weights).
    pub fn swap_in_shadow(&mut self) {
        if let Some(shadow) = self.polyak_shadow.take() {
            self.value.data_mut().copy_from_slice(&shadow);
        }
    }

    /// Overwrites the value from a loaded tensor of the same shape.
    pub fn load(&mut self, value: &Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {:?} does not match model shape {:?}",
                self.name,
                value.shape(),
                self.value.shape()
            )));
        }
        self.value.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn accumulate(&mut self, grads: &Grads) {
        self.visit_mut(&mut |p| p.accumulate(grads));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn enable_polyak(&mut self, decay: f64) -> Result<()> {
        let mut res = Ok(());
        self.visit_mut(&mut |p| {
            if p.trainable && res.is_ok() {
                res = p.enable_polyak(decay);
            }
        });
        res
    }

    fn swap_in_shadow(&mut self) {
        self.visit_mut(&mut |p| p.swap_in_shadow());
    }

    /// Squared L2 norm of all accumulated gradients.
    fn grad_norm_sq(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |p| s += p.grad.data().iter().map(|g| g * g).sum::<f64>());
        s
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl Module for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam { lr, beta1, beta2, eps, step: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated grad,
    /// followed by the Polyak shadow update where enabled.
    pub fn step(&mut self, model: &mut dyn Module) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                p.moment1[i] = b1 * p.moment1[i] + (1.0 - b1) * g;
                p.moment2[i] = b2 * p.moment2[i] + (1.0 - b2) * g * g;
                let mhat = p.moment1[i] / c1;
                let vhat = p.moment2[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.update_shadow();
        });
    }
}
