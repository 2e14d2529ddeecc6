//! Convolution layers and pre-activation residual stacks shared by every
//! network in the crate.

use std::sync::Arc;

use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::{Module, Parameter, Tape, Tensor, Var};

/// Convolution layer with optional fixed weight mask.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub mask: Option<Arc<Tensor>>,
    pub stride: usize,
}

impl Conv2d {
    /// He-style uniform init `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(vec![c_out, c_in, kernel, kernel], |_| (2.0 * rng::unit(rng) - 1.0) * bound);
        Conv2d {
            weight: Parameter::new(format!("{name}.w"), weight),
            bias: Parameter::new(format!("{name}.b"), Tensor::zeros(vec![c_out])),
            mask: None,
            stride,
        }
    }

    /// Like [`Conv2d::new`], with fan-in counted over unmasked taps and the
    /// masked weights zeroed.
    pub fn masked(name: &str, mask: Tensor, rng: &mut Rng) -> Self {
        let [c_out, c_in, k, _] = mask.dims4().expect("mask is rank 4");
        let mut conv = Conv2d::new(name, c_in, c_out, k, 1, rng);
        let per_out = mask.numel() / c_out;
        for co in 0..c_out {
            let taps = &mask.data()[co * per_out..(co + 1) * per_out];
            let fan_in = taps.iter().sum::<f64>().max(1.0);
            let scale = (6.0 / fan_in).sqrt() / (6.0 / (c_in * k * k) as f64).sqrt();
            let w = &mut conv.weight.value.data_mut()[co * per_out..(co + 1) * per_out];
            for (w, m) in w.iter_mut().zip(taps) {
                *w *= scale * m;
            }
        }
        conv.mask = Some(Arc::new(mask));
        conv
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.data_mut().fill(0.0);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.mask.clone(), self.stride)
    }

    /// Weight with the mask applied, as used by the forward pass.
    pub fn effective_weight(&self) -> Vec<f64> {
        match &self.mask {
            Some(m) => self.weight.value.data().iter().zip(m.data()).map(|(w, m)| w * m).collect(),
            None => self.weight.value.data().to_vec(),
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Full pre-activation residual block without normalization:
/// `x + conv1x1(relu(conv3x3(relu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, width: usize, inner: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv3: Conv2d::new(&format!("{name}.c3"), width, inner, 3, 1, rng),
            conv1: Conv2d::new(&format!("{name}.c1"), inner, width, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.conv3.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.conv1.forward(tape, h)?;
        tape.add(x, h)
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.conv3.visit(f);
        self.conv1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv3.visit_mut(f);
        self.conv1.visit_mut(f);
    }
}

/// A stack of [`ResBlock`]s of equal width.
#[derive(Clone, Debug)]
pub struct ResStack {
    pub blocks: Vec<ResBlock>,
}

impl ResStack {
    pub fn new(name: &str, depth: usize, width: usize, rng: &mut Rng) -> Self {
        let inner = (width / 2).max(1);
        ResStack { blocks: (0..depth).map(|i| ResBlock::new(&format!("{name}.{i}"), width, inner, rng)).collect() }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        Ok(x)
    }
}

impl Module for ResStack {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.blocks.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.blocks.visit_mut(f);
    }
}

/// Collects `(name, value)` of every parameter in visit order.
pub fn named_params(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(&mut |p| out.push((p.name.clone(), p.value.clone())));
    out
}
