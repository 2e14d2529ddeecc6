use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ResStack};
use crate::rng::Rng;
use crate::tensor::{IntTensor, Module, Parameter, Tape, Var};
use crate::vq::Codebook;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    /// Spatial downsampling factor `r`; outputs are `⌈H/r⌉ × ⌈W/r⌉`.
    pub downsample: usize,
    /// Code channels per position.
    pub channels: usize,
    /// Dimension of each code vector (the codebook's `d`).
    pub code_dim: usize,
    /// Input bins and channel groups (one-hot encoded).
    pub in_bins: usize,
    pub in_groups: usize,
}

impl EncoderConfig {
    /// Kernel of the strided output convolution: the smallest odd size
    /// covering one stride.
    pub fn out_kernel(&self) -> usize {
        let r = self.downsample;
        if r % 2 == 0 {
            r + 1
        } else {
            r + 2
        }
    }

    pub fn out_geometry(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.downsample), w.div_ceil(self.downsample))
    }

    fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.width == 0 || self.channels == 0 || self.code_dim == 0 || self.in_bins < 2 || self.in_groups == 0 {
            return Err(Error::InvalidArgument(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// One-hot input → 3×3 conv → residual stack → relu → strided conv to
/// `channels · code_dim` outputs. Deterministic.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input: Conv2d,
    pub stack: ResStack,
    pub out: Conv2d,
}

impl Encoder {
    pub fn new(name: &str, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c_in = config.in_bins * config.in_groups;
        Ok(Encoder {
            config,
            input: Conv2d::new(&format!("{name}.in"), c_in, config.width, 3, 1, rng),
            stack: ResStack::new(&format!("{name}.res"), config.layers, config.width, rng),
            out: Conv2d::new(&format!("{name}.out"), config.width, config.channels * config.code_dim, config.out_kernel(), config.downsample, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &IntTensor) -> Result<Var> {
        if x.channels() != self.config.in_groups {
            return Err(Error::Geometry(format!("encoder expects {} channels, got {}", self.config.in_groups, x.channels())));
        }
        let v = tape.constant(x.one_hot(self.config.in_bins, None)?);
        let h = self.input.forward(tape, v)?;
        let h = self.stack.forward(tape, h)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }

    /// Code indices `[N, channels, ⌈H/r⌉, ⌈W/r⌉]`, computed in parallel
    /// chunks of `chunk` items.
    pub fn encode(&self, codebook: &Codebook, x: &IntTensor, chunk: usize) -> Result<IntTensor> {
        let n = x.batch();
        let (oh, ow) = self.config.out_geometry(x.height(), x.width());
        let c = self.config.channels;
        let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
        let parts: Vec<Result<Vec<u16>>> = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + chunk.max(1)).min(n)).collect();
                let mut tape = Tape::new();
                let z = self.forward(&mut tape, &x.select(&idx))?;
                Ok(codebook.quantize(tape.value(z))?.indices.into_data())
            })
            .collect();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in parts {
            data.extend(p?);
        }
        IntTensor::new([n, c, oh, ow], data)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.input.visit(f);
        self.stack.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.input.visit_mut(f);
        self.stack.visit_mut(f);
        self.out.visit_mut(f);
    }
}
