//! Encoder training with auxiliary decoders: feed-forward reconstruction
//! and masked self-prediction with teacher→student distillation, plus the
//! end-to-end autoregressive autoencoder used as a baseline.

mod baseline;
mod encoder;
mod ff;
mod msp;

pub use baseline::{train_end_to_end_baseline, BaselineConfig, EndToEnd};
pub use encoder::{Encoder, EncoderConfig};
pub use ff::{ff_aux_loss, loss_for_level, AuxLoss, FfAux, FfAuxConfig};
pub use msp::{batch_masks, distill_loss, group_weights, make_msp_mask, positions_per_image, random_positions, teacher_loss, MspMask, Teacher};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricsWriter};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{softmax_values, IntTensor, Module, Parameter, Tape, Var};
use crate::train::{check_loss, BatchSampler, TrainConfig};
use crate::vq::{Codebook, VqConfig, VqOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    #[default]
    FeedForward,
    Msp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub kind: AuxKind,
    /// Residual blocks in the aux decoder (FF) or student head (MSP).
    pub layers: usize,
    pub width: usize,
    /// MSP mask side `2s+1`.
    pub mask_side: usize,
    pub teacher_layers: usize,
    pub teacher_width: usize,
    /// Masked regions per image; 0 derives the count from the mask side.
    pub positions: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig { kind: AuxKind::FeedForward, layers: 2, width: 32, mask_side: 3, teacher_layers: 4, teacher_width: 32, positions: 0 }
    }
}

#[derive(Clone, Debug)]
pub enum AuxHead {
    FeedForward(FfAux),
    Msp { teacher: Teacher, student: FfAux, mask_side: usize, positions: usize },
}

impl Module for AuxHead {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        match self {
            AuxHead::FeedForward(a) => a.visit(f),
            AuxHead::Msp { teacher, student, .. } => {
                teacher.visit(f);
                student.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            AuxHead::FeedForward(a) => a.visit_mut(f),
            AuxHead::Msp { teacher, student, .. } => {
                teacher.visit_mut(f);
                student.visit_mut(f);
            }
        }
    }
}

/// Encoder, codebook and the auxiliary model that trains them.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub level: usize,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub aux: AuxHead,
}

/// Graph of one training step.
pub struct AuxStep {
    pub loss: Var,
    /// Aux objective: MSE, categorical NLL, or teacher NLL + distillation.
    pub aux_loss: Var,
    pub z: Var,
    pub vq: VqOutput,
}

impl EncoderStack {
    pub fn new(prefix: &str, level: usize, encoder: EncoderConfig, vq: VqConfig, aux: AuxConfig, rng: &mut Rng) -> Result<Self> {
        if encoder.code_dim != vq.d {
            return Err(Error::Config(format!("encoder code_dim {} differs from codebook d {}", encoder.code_dim, vq.d)));
        }
        let enc = Encoder::new(&format!("{prefix}enc"), encoder, rng)?;
        let codebook = Codebook::new(prefix, vq, rng)?;
        let head = |loss, rng: &mut Rng| {
            FfAux::new(
                &format!("{prefix}aux"),
                FfAuxConfig {
                    in_channels: encoder.channels * encoder.code_dim,
                    layers: aux.layers,
                    width: aux.width,
                    upsample: encoder.downsample,
                    loss,
                    out_bins: encoder.in_bins,
                    out_groups: encoder.in_groups,
                },
                rng,
            )
        };
        let aux = match aux.kind {
            AuxKind::FeedForward => AuxHead::FeedForward(head(loss_for_level(level)?, rng)?),
            AuxKind::Msp => {
                if aux.mask_side % 2 == 0 {
                    return Err(Error::Config(format!("mask side must be odd, got {}", aux.mask_side)));
                }
                let teacher = Teacher::new(&format!("{prefix}teacher"), encoder.in_bins, encoder.in_groups, aux.teacher_layers, aux.teacher_width, rng);
                AuxHead::Msp { teacher, student: head(AuxLoss::Categorical, rng)?, mask_side: aux.mask_side, positions: aux.positions }
            }
        };
        Ok(EncoderStack { level, encoder: enc, codebook, aux })
    }

    /// Seeds the codebook from the first batch it sees.
    pub fn ensure_init(&mut self, x: &IntTensor, r: &mut Rng) -> Result<()> {
        if !self.codebook.initialized {
            let mut tape = Tape::new();
            let z = self.encoder.forward(&mut tape, x)?;
            self.codebook.init_from(tape.value(z), r)?;
        }
        Ok(())
    }

    /// Builds the full objective for one batch.
    pub fn step(&self, tape: &mut Tape, x: &IntTensor, r: &mut Rng) -> Result<AuxStep> {
        let [n, g, h, w] = x.shape();
        let z = self.encoder.forward(tape, x)?;
        let vq = self.codebook.forward(tape, z)?;
        let aux_loss = match &self.aux {
            AuxHead::FeedForward(a) => {
                let out = a.forward(tape, vq.z_st, h, w)?;
                a.loss(tape, out, x)?
            }
            AuxHead::Msp { teacher, student, mask_side, positions } => {
                let (_, keep, selected) = batch_masks(n, *mask_side, *positions, h, w, r)?;
                let wts = group_weights(&selected, n, g, h * w);
                let t_logits = teacher.forward(tape, x, &keep)?;
                let t_loss = teacher_loss(tape, t_logits, x, &selected)?;
                let t_probs = softmax_values(tape.value(t_logits), 1)?;
                let s_logits = student.forward(tape, vq.z_st, h, w)?;
                let d_loss = distill_loss(tape, &t_probs, s_logits, &wts)?;
                tape.add(t_loss, d_loss)?
            }
        };
        let loss = self.codebook.loss(tape, aux_loss, &vq)?;
        Ok(AuxStep { loss, aux_loss, z, vq })
    }

    /// EMA codebook update after the parameter step.
    pub fn after_step(&mut self, tape: &Tape, step: &AuxStep, r: &mut Rng) -> Result<()> {
        if self.codebook.config.ema {
            self.codebook.ema_update(tape.value(step.z), &step.vq.indices, r)?;
        }
        Ok(())
    }

    pub fn encode(&self, x: &IntTensor) -> Result<IntTensor> {
        self.encoder.encode(&self.codebook, x, 32)
    }

    /// Code bins at the next level.
    pub fn code_bins(&self) -> usize {
        self.codebook.k()
    }

    /// Parameters kept after training: encoder and codebook only.
    pub fn retained(&self) -> (&Encoder, &Codebook) {
        (&self.encoder, &self.codebook)
    }

    /// Drops the auxiliary decoder (and teacher), keeping encoder and codebook.
    pub fn into_retained(self) -> (Encoder, Codebook) {
        (self.encoder, self.codebook)
    }
}

impl Module for EncoderStack {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.codebook.visit(f);
        self.aux.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.codebook.visit_mut(f);
        self.aux.visit_mut(f);
    }
}

/// Trains an encoder stack alone on `data` (the level's input).
pub fn train_encoder(stack: &mut EncoderStack, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<MetricsWriter> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut r = rng::seeded(seed);
    let mut opt = cfg.optimizer(stack)?;
    let mut batches = BatchSampler::new(data.len());
    let mut metrics = MetricsWriter::new();
    for step in 0..cfg.steps {
        let x = data.images.select(&batches.next(cfg.batch, &mut r));
        stack.ensure_init(&x, &mut r)?;
        let mut tape = Tape::new();
        let out = stack.step(&mut tape, &x, &mut r)?;
        let loss = tape.value(out.loss).item();
        check_loss(&format!("encoder level {}", stack.level), step, loss)?;
        let grads = tape.backward(out.loss)?;
        stack.zero_grads();
        stack.accumulate(&grads);
        opt.step(stack);
        stack.after_step(&tape, &out, &mut r)?;
        if cfg.should_log(step) {
            metrics.push(
                step as u64,
                vec![
                    ("loss".into(), loss),
                    ("aux".into(), tape.value(out.aux_loss).item()),
                    ("perplexity".into(), out.vq.perplexity),
                ],
            )?;
        }
    }
    stack.swap_in_shadow();
    Ok(metrics)
}

/// Trains with a feed-forward aux decoder and returns the retained parts.
pub fn train_encoder_ff(data: &Dataset, level: usize, encoder: EncoderConfig, vq: VqConfig, aux: AuxConfig, cfg: &TrainConfig, seed: u64) -> Result<(Encoder, Codebook)> {
    let aux = AuxConfig { kind: AuxKind::FeedForward, ..aux };
    let mut stack = EncoderStack::new(&format!("l{level}."), level, encoder, vq, aux, &mut rng::seeded(rng::derive(seed, 1)))?;
    train_encoder(&mut stack, data, cfg, rng::derive(seed, 2))?;
    Ok(stack.into_retained())
}

/// Trains with masked self-prediction and returns the retained parts.
pub fn train_encoder_msp(data: &Dataset, level: usize, encoder: EncoderConfig, vq: VqConfig, aux: AuxConfig, cfg: &TrainConfig, seed: u64) -> Result<(Encoder, Codebook)> {
    let aux = AuxConfig { kind: AuxKind::Msp, ..aux };
    let mut stack = EncoderStack::new(&format!("l{level}."), level, encoder, vq, aux, &mut rng::seeded(rng::derive(seed, 1)))?;
    train_encoder(&mut stack, data, cfg, rng::derive(seed, 2))?;
    Ok(stack.into_retained())
}

#[cfg(test)]
mod tests;
