//! Autoregressive autoencoder trained end to end: the decoder reads the
//! straight-through quantized codes, so its NLL drives the encoder.

use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use crate::data::{Dataset, MetricsWriter};
use crate::error::{Error, Result};
use crate::pixelcnn::{bits_per_dim, nll, nll_per_item, sample, ConditionalDecoder, PixelCnnConfig, SamplerConfig};
use crate::rng::{self, Rng};
use crate::tensor::{IntTensor, Module, Parameter, Tape, Var};
use crate::train::{check_loss, BatchSampler, TrainConfig};
use crate::vq::{Codebook, VqConfig, VqOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub encoder: EncoderConfig,
    pub vq: VqConfig,
    pub decoder: PixelCnnConfig,
    pub mod_layers: usize,
    pub mod_width: usize,
}

#[derive(Clone, Debug)]
pub struct EndToEnd {
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: ConditionalDecoder,
}

pub struct EndToEndStep {
    pub loss: Var,
    pub nll: Var,
    pub z: Var,
    pub vq: VqOutput,
}

impl EndToEnd {
    pub fn new(prefix: &str, cfg: &BaselineConfig, r: &mut Rng) -> Result<Self> {
        if cfg.encoder.code_dim != cfg.vq.d {
            return Err(Error::Config(format!("encoder code_dim {} differs from codebook d {}", cfg.encoder.code_dim, cfg.vq.d)));
        }
        if cfg.decoder.bins != cfg.encoder.in_bins || cfg.decoder.groups != cfg.encoder.in_groups {
            return Err(Error::Config("decoder bins/groups must match the encoder input".into()));
        }
        let encoder = Encoder::new(&format!("{prefix}enc"), cfg.encoder, r)?;
        let codebook = Codebook::new(prefix, cfg.vq, r)?;
        let in_channels = cfg.encoder.channels * cfg.encoder.code_dim;
        let decoder = ConditionalDecoder::with_input(&format!("{prefix}dec"), cfg.decoder, in_channels, cfg.vq.k, cfg.encoder.downsample, cfg.mod_layers, cfg.mod_width, r)?;
        Ok(EndToEnd { encoder, codebook, decoder })
    }

    pub fn step(&self, tape: &mut Tape, x: &IntTensor) -> Result<EndToEndStep> {
        let z = self.encoder.forward(tape, x)?;
        let vq = self.codebook.forward(tape, z)?;
        let logits = self.decoder.forward_continuous(tape, x, vq.z_st)?;
        let nll = nll(tape, logits, x)?;
        let loss = self.codebook.loss(tape, nll, &vq)?;
        Ok(EndToEndStep { loss, nll, z, vq })
    }

    /// Per-item NLL in nats per dimension, with the codes quantized.
    pub fn nll_per_item(&self, x: &IntTensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.encoder.forward(&mut tape, x)?;
        let q = self.codebook.quantize(tape.value(z))?;
        let zq = tape.constant(q.quantized);
        let logits = self.decoder.forward_continuous(&mut tape, x, zq)?;
        nll_per_item(tape.value(logits), x)
    }

    /// Samples reconstructions of `x` from its quantized codes.
    pub fn reconstruct(&self, x: &IntTensor, cfg: &SamplerConfig) -> Result<IntTensor> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let z = self.encoder.forward(&mut tape, x)?;
        let q = self.codebook.quantize(tape.value(z))?;
        let cond = self.decoder.condition_values_continuous(&q.quantized, x.height(), x.width())?;
        sample(&self.decoder.local, Some(&cond), x.batch(), x.height(), x.width(), cfg)
    }
}

impl Module for EndToEnd {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.codebook.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.codebook.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Trains the baseline and reports NLL (bits/dim) and perplexity.
pub fn train_end_to_end_baseline(data: &Dataset, cfg: &BaselineConfig, train: &TrainConfig, seed: u64) -> Result<(EndToEnd, MetricsWriter)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut model = EndToEnd::new("e2e.", cfg, &mut rng::seeded(rng::derive(seed, 1)))?;
    let mut r = rng::seeded(rng::derive(seed, 2));
    let mut opt = train.optimizer(&mut model)?;
    let mut batches = BatchSampler::new(data.len());
    let mut metrics = MetricsWriter::new();
    for step in 0..train.steps {
        let x = data.images.select(&batches.next(train.batch, &mut r));
        if !model.codebook.initialized {
            let mut tape = Tape::new();
            let z = model.encoder.forward(&mut tape, &x)?;
            model.codebook.init_from(tape.value(z), &mut r)?;
        }
        let mut tape = Tape::new();
        let out = model.step(&mut tape, &x)?;
        let loss = tape.value(out.loss).item();
        check_loss("end-to-end baseline", step, loss)?;
        let grads = tape.backward(out.loss)?;
        model.zero_grads();
        model.accumulate(&grads);
        opt.step(&mut model);
        if model.codebook.config.ema {
            model.codebook.ema_update(tape.value(out.z), &out.vq.indices, &mut r)?;
        }
        if train.should_log(step) {
            metrics.push(
                step as u64,
                vec![
                    ("loss".into(), loss),
                    ("nll_bits_per_dim".into(), bits_per_dim(tape.value(out.nll).item())),
                    ("perplexity".into(), out.vq.perplexity),
                ],
            )?;
        }
    }
    model.swap_in_shadow();
    Ok((model, metrics))
}
