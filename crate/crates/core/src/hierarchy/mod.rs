//! Multi-level training: each level's encoder is trained through an
//! auxiliary decoder while an autoregressive decoder learns `p(x_l | x_{l+1})`
//! from the (gradient-blocked) codes; a prior models the top codes.

mod manifest;
mod sweep;

pub use manifest::{Manifest, ManifestLevel, ManifestPrior, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use sweep::{check_trend, code_predictability_sweep, predictability, read_sweep_csv, write_sweep_csv, SweepAxis, SweepRow, SweepSettings, TrendCheck, SWEEP_COLUMNS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{AuxConfig, AuxStep, EncoderConfig, EncoderStack, Encoder};
use crate::data::{Dataset, MetricsWriter};
use crate::error::{Error, Result};
use crate::pixelcnn::{bits_per_dim, nll, nll_per_item, sample_with_rng, AutoregressiveNet, ConditionalDecoder, PixelCnnConfig, SamplerConfig};
use crate::rng::{self, Rng};
use crate::tensor::{IntTensor, Module, Parameter, Tape, Var};
use crate::train::{check_loss, BatchSampler, TrainConfig};
use crate::vq::{perplexity, Codebook, VqConfig};

/// Items per forward pass during evaluation and encoding.
const EVAL_CHUNK: usize = 16;

/// Value range and shape of one level's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub bins: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn of(data: &Dataset) -> Self {
        Geometry { bins: data.bins(), groups: data.groups(), height: data.height(), width: data.width() }
    }

    /// Values per item.
    pub fn dims(&self) -> usize {
        self.groups * self.height * self.width
    }
}

/// One level: encoder, aux strategy, decoder and code geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelSpec {
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub aux: AuxConfig,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub modulator_layers: usize,
    pub modulator_width: usize,
    pub code_channels: usize,
    /// Code bins are `2^code_bits`.
    pub code_bits: u8,
    pub code_dim: usize,
    pub downsample: usize,
    pub beta: f64,
    pub gamma: f64,
    pub reseed_every: u64,
    /// Overrides the global step count for this level.
    pub steps: Option<usize>,
}

impl Default for LevelSpec {
    fn default() -> Self {
        LevelSpec {
            encoder_layers: 2,
            encoder_width: 32,
            aux: AuxConfig::default(),
            decoder_layers: 4,
            decoder_hidden: 32,
            modulator_layers: 2,
            modulator_width: 32,
            code_channels: 1,
            code_bits: 4,
            code_dim: 8,
            downsample: 2,
            beta: 0.25,
            gamma: 0.99,
            reseed_every: 0,
            steps: None,
        }
    }
}

impl LevelSpec {
    pub fn code_bins(&self) -> usize {
        1usize << self.code_bits
    }

    pub fn encoder_config(&self, input: Geometry) -> EncoderConfig {
        EncoderConfig {
            layers: self.encoder_layers,
            width: self.encoder_width,
            downsample: self.downsample,
            channels: self.code_channels,
            code_dim: self.code_dim,
            in_bins: input.bins,
            in_groups: input.groups,
        }
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig { k: self.code_bins(), d: self.code_dim, beta: self.beta, ema: true, gamma: self.gamma, reseed_every: self.reseed_every, ..VqConfig::default() }
    }

    pub fn decoder_config(&self, input: Geometry) -> PixelCnnConfig {
        PixelCnnConfig::new(self.decoder_layers, self.decoder_hidden, input.bins, input.groups)
    }

    /// Geometry of this level's codes for a given input.
    pub fn output_geometry(&self, input: Geometry) -> Geometry {
        let (height, width) = self.encoder_config(input).out_geometry(input.height, input.width);
        Geometry { bins: self.code_bins(), groups: self.code_channels, height, width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_bits == 0 || self.code_bits > 16 {
            return Err(Error::Config(format!("code_bits must be in 1..=16, got {}", self.code_bits)));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be at least 1".into()));
        }
        Ok(())
    }
}

/// The top-level model of code (or pixel, when L=1) maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub layers: usize,
    pub hidden: usize,
    /// Learn a per-class bias (class labels condition the prior only).
    pub conditional: bool,
    pub steps: Option<usize>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { layers: 8, hidden: 32, conditional: false, steps: None }
    }
}

impl PriorSpec {
    pub fn net_config(&self, input: Geometry, classes: u16) -> PixelCnnConfig {
        PixelCnnConfig { classes: if self.conditional { classes as usize } else { 0 }, ..PixelCnnConfig::new(self.layers, self.hidden, input.bins, input.groups) }
    }
}

/// A trained level `l`: `E_l`, its codebook, and `D_l`.
#[derive(Clone, Debug)]
pub struct TrainedLevel {
    pub index: usize,
    pub spec: LevelSpec,
    pub input: Geometry,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: ConditionalDecoder,
}

impl TrainedLevel {
    /// Freshly initialized (untrained) level.
    pub fn build(index: usize, spec: &LevelSpec, input: Geometry, aux: bool, r: &mut Rng) -> Result<(Self, Option<EncoderStack>)> {
        spec.validate()?;
        let prefix = format!("l{index}.");
        let stack = EncoderStack::new(&prefix, index, spec.encoder_config(input), spec.vq_config(), spec.aux, r)?;
        let decoder = ConditionalDecoder::new(
            &format!("{prefix}dec"),
            spec.decoder_config(input),
            spec.code_channels,
            spec.code_bins(),
            spec.downsample,
            spec.modulator_layers,
            spec.modulator_width,
            r,
        )?;
        let aux_stack = if aux { Some(stack.clone()) } else { None };
        let (encoder, codebook) = stack.into_retained();
        Ok((TrainedLevel { index, spec: *spec, input, encoder, codebook, decoder }, aux_stack))
    }

    pub fn output(&self) -> Geometry {
        self.spec.output_geometry(self.input)
    }

    pub fn encode(&self, x: &IntTensor) -> Result<IntTensor> {
        check_geometry(self.input, x, "level input")?;
        self.encoder.encode(&self.codebook, x, EVAL_CHUNK)
    }

    /// Summed NLL in nats of each item of `x` given the level above.
    pub fn nll_per_item(&self, x: &IntTensor, codes: &IntTensor) -> Result<Vec<f64>> {
        let chunks: Vec<Result<Vec<f64>>> = chunk_starts(x.batch())
            .into_par_iter()
            .map(|s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(x.batch())).collect();
                let mut tape = Tape::new();
                let logits = self.decoder.forward(&mut tape, &x.select(&idx), &codes.select(&idx))?;
                nll_per_item(tape.value(logits), &x.select(&idx))
            })
            .collect();
        flatten(chunks)
    }

    /// Samples `x_l` given the codes of the level above.
    pub fn decode(&self, codes: &IntTensor, cfg: &SamplerConfig, r: &mut Rng) -> Result<IntTensor> {
        let cond = self.decoder.condition_values(codes, self.input.height, self.input.width)?;
        sample_with_rng(&self.decoder.local, Some(&cond), codes.batch(), self.input.height, self.input.width, cfg, r)
    }
}

impl Module for TrainedLevel {
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

/// Encoder stack and decoder of one level under joint training.
pub struct LevelTrainer {
    pub stack: EncoderStack,
    pub decoder: ConditionalDecoder,
}

/// Both graphs of one level step, recorded on one tape.
pub struct LevelStep {
    pub aux: AuxStep,
    /// Decoder NLL (nats/dim); its graph starts from constant codes.
    pub decoder_nll: Var,
    pub total: Var,
}

impl LevelTrainer {
    pub fn step(&self, tape: &mut Tape, x: &IntTensor, r: &mut Rng) -> Result<LevelStep> {
        let aux = self.stack.step(tape, x, r)?;
        // The decoder reads integer codes as one-hot constants, so no
        // gradient from its NLL reaches the encoder or codebook.
        let logits = self.decoder.forward(tape, x, &aux.vq.indices)?;
        let decoder_nll = nll(tape, logits, x)?;
        let total = tape.add(aux.loss, decoder_nll)?;
        Ok(LevelStep { aux, decoder_nll, total })
    }
}

impl Module for LevelTrainer {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.stack.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stack.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Trains `E_l` (through its auxiliary model) and `D_l` simultaneously.
pub fn train_level(data: &Dataset, index: usize, spec: &LevelSpec, train: &TrainConfig, seed: u64) -> Result<(TrainedLevel, MetricsWriter)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let input = Geometry::of(data);
    let (level, stack) = TrainedLevel::build(index, spec, input, true, &mut rng::seeded(rng::derive(seed, 1)))?;
    let mut trainer = LevelTrainer { stack: stack.expect("aux stack requested"), decoder: level.decoder };
    let mut r = rng::seeded(rng::derive(seed, 2));
    let mut opt = train.optimizer(&mut trainer)?;
    let mut batches = BatchSampler::new(data.len());
    let mut metrics = MetricsWriter::new();
    let steps = spec.steps.unwrap_or(train.steps);
    for step in 0..steps {
        let x = data.images.select(&batches.next(train.batch, &mut r));
        trainer.stack.ensure_init(&x, &mut r)?;
        let mut tape = Tape::new();
        let out = trainer.step(&mut tape, &x, &mut r)?;
        let loss = tape.value(out.total).item();
        check_loss(&format!("level {index}"), step, loss)?;
        let grads = tape.backward(out.total)?;
        trainer.zero_grads();
        trainer.accumulate(&grads);
        opt.step(&mut trainer);
        trainer.stack.after_step(&tape, &out.aux, &mut r)?;
        if step + 1 == steps || (train.log_every > 0 && step % train.log_every == 0) {
            metrics.push(
                step as u64,
                vec![
                    ("loss".into(), loss),
                    ("aux".into(), tape.value(out.aux.aux_loss).item()),
                    ("nll_bits_per_dim".into(), bits_per_dim(tape.value(out.decoder_nll).item())),
                    ("perplexity".into(), out.aux.vq.perplexity),
                ],
            )?;
        }
    }
    trainer.swap_in_shadow();
    let (encoder, codebook) = trainer.stack.into_retained();
    Ok((TrainedLevel { index, spec: *spec, input, encoder, codebook, decoder: trainer.decoder }, metrics))
}

/// `x_{l+1} := E_l(x_l)`, labels carried through.
pub fn encode_dataset(level: &TrainedLevel, data: &Dataset) -> Result<Dataset> {
    let codes = level.encode(&data.images)?;
    Dataset::new(codes, data.labels.clone(), level.spec.code_bits, data.classes)
}

/// Code-usage perplexity of a code dataset.
pub fn code_perplexity(codes: &Dataset) -> f64 {
    perplexity(codes.images.data(), codes.bins())
}

pub fn build_prior(spec: &PriorSpec, input: Geometry, classes: u16, r: &mut Rng) -> Result<AutoregressiveNet> {
    AutoregressiveNet::new("prior", spec.net_config(input, classes), r)
}

pub fn train_prior(data: &Dataset, spec: &PriorSpec, train: &TrainConfig, seed: u64) -> Result<(AutoregressiveNet, MetricsWriter)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut net = build_prior(spec, Geometry::of(data), data.classes, &mut rng::seeded(rng::derive(seed, 1)))?;
    let mut r = rng::seeded(rng::derive(seed, 2));
    let mut opt = train.optimizer(&mut net)?;
    let mut batches = BatchSampler::new(data.len());
    let mut metrics = MetricsWriter::new();
    let steps = spec.steps.unwrap_or(train.steps);
    for step in 0..steps {
        let idx = batches.next(train.batch, &mut r);
        let x = data.images.select(&idx);
        let labels: Vec<u16> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let cond = net.conditioning(&mut tape, None, spec.conditional.then_some(&labels[..]))?;
        let logits = net.forward(&mut tape, &x, cond)?;
        let loss = nll(&mut tape, logits, &x)?;
        let value = tape.value(loss).item();
        check_loss("prior", step, value)?;
        let grads = tape.backward(loss)?;
        net.zero_grads();
        net.accumulate(&grads);
        opt.step(&mut net);
        if step + 1 == steps || (train.log_every > 0 && step % train.log_every == 0) {
            metrics.push(step as u64, vec![("loss".into(), value), ("nll_bits_per_dim".into(), bits_per_dim(value))])?;
        }
    }
    net.swap_in_shadow();
    Ok((net, metrics))
}

/// Summed NLL in nats of each item under a (possibly class-conditional) net.
pub fn net_nll_per_item(net: &AutoregressiveNet, x: &IntTensor, labels: Option<&[u16]>) -> Result<Vec<f64>> {
    let chunks: Vec<Result<Vec<f64>>> = chunk_starts(x.batch())
        .into_par_iter()
        .map(|s| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(x.batch())).collect();
            let xs = x.select(&idx);
            let ls: Option<Vec<u16>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let mut tape = Tape::new();
            let cond = net.conditioning(&mut tape, None, ls.as_deref())?;
            let logits = net.forward(&mut tape, &xs, cond)?;
            nll_per_item(tape.value(logits), &xs)
        })
        .collect();
    flatten(chunks)
}

/// Mean NLL in bits per position (per value) over a dataset.
pub fn mean_bits_per_value(net: &AutoregressiveNet, data: &Dataset, labels: bool) -> Result<f64> {
    let per = net_nll_per_item(net, &data.images, labels.then_some(&data.labels[..]))?;
    let total: f64 = per.iter().sum();
    Ok(bits_per_dim(total / (data.len() * data.images.item_len()) as f64))
}

/// Decoders `D_1..D_{L-1}` with their encoders, and the prior `P`.
#[derive(Clone, Debug)]
pub struct HierarchicalModel {
    pub levels: Vec<TrainedLevel>,
    pub prior: AutoregressiveNet,
    pub prior_spec: PriorSpec,
    /// Geometry of the prior's input (pixels when L=1).
    pub top: Geometry,
    pub pixels: Geometry,
    pub pixel_bits: u8,
    pub classes: u16,
}

/// Joint NLL `-log p(x, z_2, …, z_L)` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct JointNllReport {
    /// `-log p(x_l | x_{l+1})` in nats, for l = 1..L-1.
    pub levels: Vec<f64>,
    /// `-log p(x_L)` in nats.
    pub prior: f64,
    pub total: f64,
    /// `total` in bits per pixel dimension.
    pub bits_per_dim: f64,
}

impl JointNllReport {
    pub fn from_parts(levels: Vec<f64>, prior: f64, pixel_dims: usize) -> Self {
        let total = levels.iter().sum::<f64>() + prior;
        JointNllReport { levels, prior, total, bits_per_dim: bits_per_dim(total / pixel_dims as f64) }
    }
}

/// Trains every level in turn, then the prior on the top codes.
pub fn train_hierarchy(data: &Dataset, specs: &[LevelSpec], prior: &PriorSpec, train: &TrainConfig, seed: u64) -> Result<(HierarchicalModel, Vec<(String, MetricsWriter)>)> {
    let pixels = Geometry::of(data);
    let mut input = pixels;
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        let out = s.output_geometry(input);
        if out.height == 0 || out.width == 0 {
            return Err(Error::Geometry(format!("level {} maps {}x{} to an empty code map", i + 1, input.height, input.width)));
        }
        input = out;
    }
    let mut current = data.clone();
    let mut levels = Vec::new();
    let mut metrics = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let (level, m) = train_level(&current, i + 1, s, train, rng::derive(seed, 10 + i as u64))?;
        current = encode_dataset(&level, &current)?;
        metrics.push((format!("level{}", i + 1), m));
        levels.push(level);
    }
    let (net, m) = train_prior(&current, prior, train, rng::derive(seed, 100))?;
    metrics.push(("prior".into(), m));
    Ok((
        HierarchicalModel { levels, prior: net, prior_spec: *prior, top: Geometry::of(&current), pixels, pixel_bits: data.bits, classes: data.classes },
        metrics,
    ))
}

impl HierarchicalModel {
    /// Number of levels `L` (the prior counts as one).
    pub fn depth(&self) -> usize {
        self.levels.len() + 1
    }

    /// `x_1, …, x_{k+1}` for `k` encoded levels.
    pub fn encode_chain(&self, images: &IntTensor, k: usize) -> Result<Vec<IntTensor>> {
        if k > self.levels.len() {
            return Err(Error::InvalidArgument(format!("cannot encode {k} levels, model has {}", self.levels.len())));
        }
        check_geometry(self.pixels, images, "image")?;
        let mut chain = vec![images.clone()];
        for level in &self.levels[..k] {
            let next = level.encode(chain.last().expect("non-empty"))?;
            chain.push(next);
        }
        Ok(chain)
    }

    fn check_labels(&self, labels: Option<&[u16]>) -> Result<()> {
        if let Some(ls) = labels {
            if !self.prior_spec.conditional {
                return Err(Error::InvalidArgument("the prior is not class-conditional".into()));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l >= self.classes) {
                return Err(Error::InvalidArgument(format!("class {bad} out of range 0..{}", self.classes)));
            }
        }
        Ok(())
    }

    /// Decodes codes at level `k+1` down to pixels, sampling each level.
    pub fn decode_from(&self, codes: &IntTensor, k: usize, cfg: &SamplerConfig, r: &mut Rng) -> Result<IntTensor> {
        let mut x = codes.clone();
        for level in self.levels[..k].iter().rev() {
            x = level.decode(&x, cfg, r)?;
        }
        Ok(x)
    }

    /// Ancestral sampling: top codes from the prior, then each level down.
    pub fn sample(&self, labels: Option<&[u16]>, n: usize, cfg: &SamplerConfig) -> Result<IntTensor> {
        cfg.validate()?;
        self.check_labels(labels)?;
        if let Some(ls) = labels {
            if ls.len() != n && ls.len() != 1 {
                return Err(Error::InvalidArgument(format!("{} labels for {n} samples", ls.len())));
            }
        }
        let mut r = rng::seeded(cfg.seed);
        let cond = match labels {
            Some(ls) => {
                let mut tape = Tape::new();
                let c = self.prior.conditioning(&mut tape, None, Some(ls))?.expect("labels give conditioning");
                Some(tape.value(c).clone())
            }
            None => None,
        };
        let top = sample_with_rng(&self.prior, cond.as_ref(), n, self.top.height, self.top.width, cfg, &mut r)?;
        self.decode_from(&top, self.levels.len(), cfg, &mut r)
    }

    /// Encodes through `k` levels and samples back down to pixels.
    pub fn reconstruct(&self, images: &IntTensor, k: usize, cfg: &SamplerConfig) -> Result<IntTensor> {
        cfg.validate()?;
        let chain = self.encode_chain(images, k)?;
        let mut r = rng::seeded(cfg.seed);
        self.decode_from(chain.last().expect("non-empty"), k, cfg, &mut r)
    }

    /// Joint NLL of each image with every code fixed by the encoders.
    pub fn joint_nll(&self, images: &IntTensor, labels: Option<&[u16]>) -> Result<Vec<JointNllReport>> {
        self.check_labels(labels)?;
        let chain = self.encode_chain(images, self.levels.len())?;
        let n = images.batch();
        let mut per_level = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            per_level.push(level.nll_per_item(&chain[l], &chain[l + 1])?);
        }
        let prior = net_nll_per_item(&self.prior, chain.last().expect("non-empty"), labels)?;
        Ok((0..n).map(|i| JointNllReport::from_parts(per_level.iter().map(|v| v[i]).collect(), prior[i], self.pixels.dims())).collect())
    }
}

fn check_geometry(g: Geometry, x: &IntTensor, what: &str) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != g.groups || h != g.height || w != g.width {
        return Err(Error::Geometry(format!("{what} is {c}x{h}x{w}, expected {}x{}x{}", g.groups, g.height, g.width)));
    }
    if let Some(v) = x.max_value() {
        if v as usize >= g.bins {
            return Err(Error::IndexOutOfRange { op: "level input value", index: v as usize, limit: g.bins });
        }
    }
    Ok(())
}

fn chunk_starts(n: usize) -> Vec<usize> {
    (0..n).step_by(EVAL_CHUNK).collect()
}

fn flatten(chunks: Vec<Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Mean pixel value scaled to `[0, 1]` for each image.
pub fn mean_intensity(images: &IntTensor, bins: usize) -> Vec<f64> {
    let len = images.item_len();
    let scale = 1.0 / (bins.max(2) - 1) as f64;
    images.data().chunks(len.max(1)).take(images.batch()).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() * scale / len as f64).collect()
}
