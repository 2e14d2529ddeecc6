//! Gated PixelCNN over integer images or code maps.
//!
//! The net factorizes `p(x) = ∏ p(x_t | x_<t)` in raster order (rows, then
//! columns, then channel groups) using masked convolutions. Conditioning
//! enters only as additive biases on each gated block, produced by a
//! [`Modulator`] from a code map and/or a learned per-class bias.

mod checkpoint;
mod mask;
mod sample;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use mask::{contiguous_groups, make_weight_mask, weight_mask_with_groups, MaskKind, MaskedConvSpec};
pub use sample::{draw, sample, sample_with_rng, IncrementalSampler, SampleMode, SamplerConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ResStack};
use crate::rng::Rng;
use crate::tensor::{nll_per_position, IntTensor, Module, Parameter, Tape, Tensor, Var};

/// Raster-scan index of `(row, col, group)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RasterOrder {
    pub height: usize,
    pub width: usize,
    pub groups: usize,
}

impl RasterOrder {
    pub fn len(&self) -> usize {
        self.height * self.width * self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, g: usize) -> usize {
        (i * self.width + j) * self.groups + g
    }

    pub fn position(&self, t: usize) -> (usize, usize, usize) {
        let g = t % self.groups;
        let p = t / self.groups;
        (p / self.width, p % self.width, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelCnnConfig {
    /// Number of gated blocks.
    pub layers: usize,
    pub hidden: usize,
    /// Values per channel (logit head width).
    pub bins: usize,
    /// Channel groups ordered within a position (3 for RGB).
    pub groups: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    /// Class count for a learned per-class bias; 0 disables it.
    pub classes: usize,
}

impl PixelCnnConfig {
    pub fn new(layers: usize, hidden: usize, bins: usize, groups: usize) -> Self {
        PixelCnnConfig { layers, hidden, bins, groups, first_kernel: 5, kernel: 3, classes: 0 }
    }

    /// Channels of the conditioning bias tensor: filter and gate bias per block.
    pub fn cond_channels(&self) -> usize {
        self.layers * 2 * self.hidden
    }

    fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.groups == 0 {
            return Err(Error::InvalidArgument(format!("pixelcnn needs bins >= 2 and groups >= 1: {self:?}")));
        }
        if self.layers > 0 && (self.hidden == 0 || self.hidden % self.groups != 0) {
            return Err(Error::InvalidArgument(format!(
                "hidden width {} must be a positive multiple of groups {}",
                self.hidden, self.groups
            )));
        }
        for k in [self.first_kernel, self.kernel] {
            if k % 2 == 0 {
                return Err(Error::EvenKernel(k, k));
            }
        }
        Ok(())
    }
}

/// `out = residual + proj(tanh(conv_f(x) + c_f) ⊙ sigmoid(conv_g(x) + c_g))`.
///
/// Filter and gate convolutions share one weight tensor: output channels
/// `[0, hidden)` are the filter path, `[hidden, 2·hidden)` the gate path.
#[derive(Clone, Debug)]
pub struct GatedBlock {
    pub gates: Conv2d,
    pub proj: Conv2d,
    pub residual: bool,
}

impl GatedBlock {
    pub fn hidden(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, cond: Option<Var>) -> Result<Var> {
        let h = self.hidden();
        let mut pre = self.gates.forward(tape, x)?;
        if let Some(c) = cond {
            pre = tape.add(pre, c)?;
        }
        let f = tape.narrow(pre, 1, 0, h)?;
        let g = tape.narrow(pre, 1, h, h)?;
        let f = tape.tanh(f)?;
        let g = tape.sigmoid(g)?;
        let y = tape.mul(f, g)?;
        let p = self.proj.forward(tape, y)?;
        if self.residual {
            tape.add(x, p)
        } else {
            Ok(p)
        }
    }
}

impl Module for GatedBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.gates.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.gates.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

/// Logits of a forward pass plus every block output, for cache checks.
pub struct Traced {
    pub logits: Var,
    pub block_outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct AutoregressiveNet {
    pub config: PixelCnnConfig,
    pub blocks: Vec<GatedBlock>,
    pub head: Conv2d,
    pub class_bias: Option<Conv2d>,
}

impl AutoregressiveNet {
    pub fn new(name: &str, config: PixelCnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let PixelCnnConfig { layers, hidden, bins, groups, .. } = config;
        let onehot_groups: Vec<usize> = (0..groups * bins).map(|c| c / bins).collect();
        let hidden_groups = contiguous_groups(hidden.max(groups), groups)?;
        // filter and gate halves carry the same group layout
        let gate_groups: Vec<usize> = hidden_groups.iter().chain(&hidden_groups).copied().collect();
        // head channel b·G + g predicts group g, giving logits [N, B, G, H, W]
        let head_groups: Vec<usize> = (0..groups * bins).map(|c| c % groups).collect();

        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let (kind, kernel, in_groups) = if l == 0 {
                (MaskKind::A, config.first_kernel, &onehot_groups)
            } else {
                (MaskKind::B, config.kernel, &hidden_groups)
            };
            let gates_mask = weight_mask_with_groups(kind, kernel, in_groups, &gate_groups)?;
            let proj_mask = weight_mask_with_groups(MaskKind::B, 1, &hidden_groups, &hidden_groups)?;
            blocks.push(GatedBlock {
                gates: Conv2d::masked(&format!("{name}.block{l}.gates"), gates_mask, rng),
                proj: Conv2d::masked(&format!("{name}.block{l}.proj"), proj_mask, rng),
                residual: l > 0,
            });
        }
        let head_mask = if layers == 0 {
            weight_mask_with_groups(MaskKind::A, 1, &onehot_groups, &head_groups)?
        } else {
            weight_mask_with_groups(MaskKind::B, 1, &hidden_groups, &head_groups)?
        };
        let head = Conv2d::masked(&format!("{name}.head"), head_mask, rng);
        let class_bias = (config.classes > 0)
            .then(|| Conv2d::new(&format!("{name}.class_bias"), config.classes, config.cond_channels().max(1), 1, 1, rng).zero_init());
        Ok(AutoregressiveNet { config, blocks, head, class_bias })
    }

    pub fn raster(&self, height: usize, width: usize) -> RasterOrder {
        RasterOrder { height, width, groups: self.config.groups }
    }

    /// Sums modulator biases and the per-class bias into one conditioning
    /// tensor `[N|1, layers·2·hidden, H|1, W|1]`.
    pub fn conditioning(&self, tape: &mut Tape, modulated: Option<Var>, labels: Option<&[u16]>) -> Result<Option<Var>> {
        let class = match (labels, &self.class_bias) {
            (Some(labels), Some(cb)) => {
                let classes = self.config.classes;
                let mut onehot = vec![0.0; labels.len() * classes];
                for (n, &l) in labels.iter().enumerate() {
                    if l as usize >= classes {
                        return Err(Error::IndexOutOfRange { op: "class label", index: l as usize, limit: classes });
                    }
                    onehot[n * classes + l as usize] = 1.0;
                }
                let v = tape.constant(Tensor::new(vec![labels.len(), classes, 1, 1], onehot)?);
                Some(cb.forward(tape, v)?)
            }
            (Some(_), None) => return Err(Error::InvalidArgument("labels given to a net without class conditioning".into())),
            (None, _) => None,
        };
        if let Some(m) = modulated {
            let c = tape.shape(m)[1];
            if c != self.config.cond_channels() {
                return Err(Error::shape("conditioning", format!("{c} channels, expected {}", self.config.cond_channels())));
            }
        }
        Ok(match (modulated, class) {
            (Some(m), Some(c)) => Some(tape.add(m, c)?),
            (m, c) => m.or(c),
        })
    }

    fn check_input(&self, x: &IntTensor) -> Result<()> {
        if x.channels() != self.config.groups {
            return Err(Error::shape("pixelcnn", format!("input has {} channels, net has {} groups", x.channels(), self.config.groups)));
        }
        if let Some(&bad) = x.data().iter().find(|&&v| v as usize >= self.config.bins) {
            return Err(Error::IndexOutOfRange { op: "pixelcnn input value", index: bad as usize, limit: self.config.bins });
        }
        Ok(())
    }

    /// Logits `[N, B, G, H, W]`; `cond` is the output of [`Self::conditioning`].
    pub fn forward(&self, tape: &mut Tape, x: &IntTensor, cond: Option<Var>) -> Result<Var> {
        Ok(self.forward_traced(tape, x, cond)?.logits)
    }

    pub fn forward_traced(&self, tape: &mut Tape, x: &IntTensor, cond: Option<Var>) -> Result<Traced> {
        self.check_input(x)?;
        if cond.is_some() && self.blocks.is_empty() {
            return Err(Error::InvalidArgument("a zero-layer net has no conditioning slots".into()));
        }
        let [n, g, hgt, wid] = x.shape();
        let onehot = tape.constant(x.one_hot(self.config.bins, None)?);
        let two_h = 2 * self.config.hidden;
        let mut h = onehot;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let c = match cond {
                Some(c) => Some(tape.narrow(c, 1, l * two_h, two_h)?),
                None => None,
            };
            h = block.forward(tape, h, c)?;
            block_outputs.push(h);
        }
        if !self.blocks.is_empty() {
            h = tape.relu(h)?;
        }
        let logits = self.head.forward(tape, h)?;
        let logits = tape.reshape(logits, vec![n, self.config.bins, g, hgt, wid])?;
        Ok(Traced { logits, block_outputs })
    }
}

impl Module for AutoregressiveNet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.blocks.visit(f);
        self.head.visit(f);
        self.class_bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.blocks.visit_mut(f);
        self.head.visit_mut(f);
        self.class_bias.visit_mut(f);
    }
}

/// Mean NLL in nats per position of `x` under `logits [N, B, G, H, W]`.
pub fn nll(tape: &mut Tape, logits: Var, x: &IntTensor) -> Result<Var> {
    tape.cross_entropy(logits, 1, &x.to_indices(), None)
}

/// Summed NLL in nats for each batch item.
pub fn nll_per_item(logits: &Tensor, x: &IntTensor) -> Result<Vec<f64>> {
    let per_pos = nll_per_position(logits, 1, &x.to_indices())?;
    Ok(per_pos.chunks(x.item_len().max(1)).map(|c| c.iter().sum()).collect())
}

pub fn bits_per_dim(nll_nats: f64) -> f64 {
    nll_nats / std::f64::consts::LN_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulatorConfig {
    /// Input channels: one-hot code channels, or continuous code dims.
    pub in_channels: usize,
    pub upsample: usize,
    pub layers: usize,
    pub width: usize,
    pub out_channels: usize,
}

/// Residual net mapping a code map to per-block conditioning biases.
///
/// Upsampling happens first (3×3 conv to `width·r²` channels, then
/// depth-to-space), followed by residual blocks and a 1×1 projection.
#[derive(Clone, Debug)]
pub struct Modulator {
    pub config: ModulatorConfig,
    pub input: Conv2d,
    pub stack: ResStack,
    pub out: Conv2d,
}

impl Modulator {
    pub fn new(name: &str, config: ModulatorConfig, rng: &mut Rng) -> Self {
        let r = config.upsample.max(1);
        Modulator {
            config,
            input: Conv2d::new(&format!("{name}.in"), config.in_channels, config.width * r * r, 3, 1, rng),
            stack: ResStack::new(&format!("{name}.res"), config.layers, config.width, rng),
            out: Conv2d::new(&format!("{name}.out"), config.width, config.out_channels, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, codes: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, codes)?;
        if self.config.upsample > 1 {
            h = tape.depth_to_space(h, self.config.upsample)?;
        }
        let h = self.stack.forward(tape, h)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }
}

impl Module for Modulator {
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

/// Autoregressive decoder: local PixelCNN plus a modulator over codes.
#[derive(Clone, Debug)]
pub struct ConditionalDecoder {
    pub local: AutoregressiveNet,
    pub modulator: Modulator,
    /// Bins per code channel when conditioning on integer codes.
    pub code_bins: usize,
}

impl ConditionalDecoder {
    pub fn new(name: &str, local: PixelCnnConfig, code_channels: usize, code_bins: usize, upsample: usize, mod_layers: usize, mod_width: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_input(name, local, code_channels * code_bins, code_bins, upsample, mod_layers, mod_width, rng)
    }

    /// Decoder whose modulator reads `in_channels` continuous channels.
    #[allow(clippy::too_many_arguments)]
    pub fn with_input(name: &str, local: PixelCnnConfig, in_channels: usize, code_bins: usize, upsample: usize, mod_layers: usize, mod_width: usize, rng: &mut Rng) -> Result<Self> {
        let local = AutoregressiveNet::new(&format!("{name}.local"), local, rng)?;
        let mc = ModulatorConfig { in_channels, upsample, layers: mod_layers, width: mod_width, out_channels: local.config.cond_channels() };
        let modulator = Modulator::new(&format!("{name}.mod"), mc, rng);
        Ok(ConditionalDecoder { local, modulator, code_bins })
    }

    /// Conditioning biases from integer codes.
    pub fn condition(&self, tape: &mut Tape, codes: &IntTensor) -> Result<Var> {
        let onehot = tape.constant(codes.one_hot(self.code_bins, None)?);
        self.modulator.forward(tape, onehot)
    }

    pub fn forward(&self, tape: &mut Tape, x: &IntTensor, codes: &IntTensor) -> Result<Var> {
        let m = self.condition(tape, codes)?;
        let m = self.fit(tape, m, x.height(), x.width())?;
        let cond = self.local.conditioning(tape, Some(m), None)?;
        self.local.forward(tape, x, cond)
    }

    /// Forward with a continuous code input (gradients reach the codes).
    pub fn forward_continuous(&self, tape: &mut Tape, x: &IntTensor, z: Var) -> Result<Var> {
        let m = self.modulator.forward(tape, z)?;
        let m = self.fit(tape, m, x.height(), x.width())?;
        let cond = self.local.conditioning(tape, Some(m), None)?;
        self.local.forward(tape, x, cond)
    }

    /// Crops an oversized modulator output (image sides not divisible by
    /// the upsampling factor) to the image.
    fn fit(&self, tape: &mut Tape, m: Var, h: usize, w: usize) -> Result<Var> {
        let s = tape.shape(m).to_vec();
        if s[2] < h || s[3] < w || s[2] >= h + self.modulator.config.upsample.max(1) || s[3] >= w + self.modulator.config.upsample.max(1) {
            return Err(Error::Geometry(format!("modulator output {}x{} does not match decoder input {h}x{w}", s[2], s[3])));
        }
        let mut m = m;
        if s[2] > h {
            m = tape.narrow(m, 2, 0, h)?;
        }
        if s[3] > w {
            m = tape.narrow(m, 3, 0, w)?;
        }
        Ok(m)
    }

    /// Conditioning tensor values for sampling an `h × w` image.
    pub fn condition_values(&self, codes: &IntTensor, h: usize, w: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.condition(&mut tape, codes)?;
        let m = self.fit(&mut tape, m, h, w)?;
        Ok(tape.value(m).clone())
    }

    /// Conditioning values from a continuous code map.
    pub fn condition_values_continuous(&self, z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z.clone());
        let m = self.modulator.forward(&mut tape, z)?;
        let m = self.fit(&mut tape, m, h, w)?;
        Ok(tape.value(m).clone())
    }
}

impl Module for ConditionalDecoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.local.visit(f);
        self.modulator.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.local.visit_mut(f);
        self.modulator.visit_mut(f);
    }
}

#[cfg(test)]
mod tests;
