use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ResStack};
use crate::rng::Rng;
use crate::tensor::{IntTensor, Module, Parameter, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    /// Squared error on intensities scaled to `[0, 1]` (level 1 only).
    MsePixels,
    /// Per-position categorical NLL over the level's bins.
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfAuxConfig {
    pub in_channels: usize,
    pub layers: usize,
    pub width: usize,
    pub upsample: usize,
    pub loss: AuxLoss,
    /// Target bins and channel groups.
    pub out_bins: usize,
    pub out_groups: usize,
}

/// Feed-forward decoder from quantized codes back to the level input:
/// 1×1 conv to `width·r²`, subpixel upsampling, residual stack, relu and a
/// 1×1 output conv. With zero layers each output block sees one code.
#[derive(Clone, Debug)]
pub struct FfAux {
    pub config: FfAuxConfig,
    pub input: Conv2d,
    pub stack: ResStack,
    pub out: Conv2d,
}

impl FfAux {
    pub fn new(name: &str, config: FfAuxConfig, rng: &mut Rng) -> Result<Self> {
        if config.upsample == 0 || config.width == 0 || config.out_groups == 0 || config.out_bins < 2 {
            return Err(Error::InvalidArgument(format!("invalid aux decoder config {config:?}")));
        }
        let r = config.upsample;
        let out_c = match config.loss {
            AuxLoss::MsePixels => config.out_groups,
            AuxLoss::Categorical => config.out_groups * config.out_bins,
        };
        Ok(FfAux {
            config,
            input: Conv2d::new(&format!("{name}.in"), config.in_channels, config.width * r * r, 1, 1, rng),
            stack: ResStack::new(&format!("{name}.res"), config.layers, config.width, rng),
            out: Conv2d::new(&format!("{name}.out"), config.width, out_c, 1, 1, rng),
        })
    }

    /// Reconstruction `[N, G, H, W]` (MSE) or logits `[N, B, G, H, W]`,
    /// cropped to `h × w`.
    pub fn forward(&self, tape: &mut Tape, z: Var, h: usize, w: usize) -> Result<Var> {
        let mut y = self.input.forward(tape, z)?;
        if self.config.upsample > 1 {
            y = tape.depth_to_space(y, self.config.upsample)?;
        }
        let y = self.stack.forward(tape, y)?;
        let y = tape.relu(y)?;
        let mut y = self.out.forward(tape, y)?;
        let s = tape.shape(y).to_vec();
        if s[2] < h || s[3] < w {
            return Err(Error::Geometry(format!("aux decoder output {}x{} smaller than target {h}x{w}", s[2], s[3])));
        }
        if s[2] > h {
            y = tape.narrow(y, 2, 0, h)?;
        }
        if s[3] > w {
            y = tape.narrow(y, 3, 0, w)?;
        }
        match self.config.loss {
            AuxLoss::MsePixels => Ok(y),
            AuxLoss::Categorical => {
                let (g, b) = (self.config.out_groups, self.config.out_bins);
                tape.reshape(y, vec![s[0], b, g, h, w])
            }
        }
    }

    /// Aux loss against the level input `x`.
    pub fn loss(&self, tape: &mut Tape, out: Var, x: &IntTensor) -> Result<Var> {
        ff_aux_loss(tape, self.config.loss, out, x, self.config.out_bins)
    }
}

/// MSE on unit-scaled values, or mean categorical NLL over `bins`.
pub fn ff_aux_loss(tape: &mut Tape, kind: AuxLoss, out: Var, x: &IntTensor, bins: usize) -> Result<Var> {
    match kind {
        AuxLoss::MsePixels => {
            let target = tape.constant(x.to_unit_float(bins));
            tape.mse(out, target)
        }
        AuxLoss::Categorical => tape.cross_entropy(out, 1, &x.to_indices(), None),
    }
}

/// The loss kind a level must use: pixels at level 1, codes above.
pub fn loss_for_level(level: usize) -> Result<AuxLoss> {
    match level {
        0 => Err(Error::InvalidArgument("levels are numbered from 1".into())),
        1 => Ok(AuxLoss::MsePixels),
        _ => Ok(AuxLoss::Categorical),
    }
}

impl Module for FfAux {
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
