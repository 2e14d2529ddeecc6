use serde::{Deserialize, Serialize};

use super::AutoregressiveNet;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{conv_at, IntTensor, Tape, Tensor, UnaryKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Naive,
    #[default]
    Incremental,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
    pub mode: SampleMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 1.0, seed: 0, mode: SampleMode::Incremental }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from `softmax(logits / T)` with one uniform `u ∈ [0, 1)`.
pub fn draw(logits: &[f64], temperature: f64, u: f64) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let target = u * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (b, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return b;
        }
    }
    // u·sum can round up to the total; fall back to the last nonzero bin
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Conditioning tensor `[N|1, C, H|1, W|1]` checked against the sample geometry.
fn check_cond(net: &AutoregressiveNet, cond: Option<&Tensor>, n: usize, h: usize, w: usize) -> Result<()> {
    let Some(c) = cond else { return Ok(()) };
    let s = c.dims4()?;
    let ok = |d: usize, full: usize| d == 1 || d == full;
    if s[1] != net.config.cond_channels() || !ok(s[0], n) || !ok(s[2], h) || !ok(s[3], w) {
        return Err(Error::shape("sample conditioning", format!("{s:?} for batch {n} of {h}x{w}")));
    }
    if net.blocks.is_empty() {
        return Err(Error::InvalidArgument("a zero-layer net has no conditioning slots".into()));
    }
    Ok(())
}

/// Samples `n` images of `h × w` in raster order. Draw order is fixed:
/// for each position and group, one uniform per batch item.
pub fn sample(net: &AutoregressiveNet, cond: Option<&Tensor>, n: usize, h: usize, w: usize, cfg: &SamplerConfig) -> Result<IntTensor> {
    let mut rng = rng::seeded(cfg.seed);
    sample_with_rng(net, cond, n, h, w, cfg, &mut rng)
}

pub fn sample_with_rng(
    net: &AutoregressiveNet,
    cond: Option<&Tensor>,
    n: usize,
    h: usize,
    w: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<IntTensor> {
    cfg.validate()?;
    check_cond(net, cond, n, h, w)?;
    match cfg.mode {
        SampleMode::Naive => sample_naive(net, cond, n, h, w, cfg.temperature, rng),
        SampleMode::Incremental => {
            let mut s = IncrementalSampler::new(net, cond, n, h, w)?;
            for t in 0..s.order().len() {
                s.step(t, cfg.temperature, rng)?;
            }
            Ok(s.into_image())
        }
    }
}

fn sample_naive(net: &AutoregressiveNet, cond: Option<&Tensor>, n: usize, h: usize, w: usize, temperature: f64, rng: &mut Rng) -> Result<IntTensor> {
    let order = net.raster(h, w);
    let groups = order.groups;
    let bins = net.config.bins;
    let mut x = IntTensor::zeros([n, groups, h, w]);
    let plane = h * w;
    for t in 0..order.len() {
        let (i, j, g) = order.position(t);
        let mut tape = Tape::new();
        let c = cond.map(|c| tape.constant(c.clone()));
        let logits = net.forward(&mut tape, &x, c)?;
        let lv = tape.value(logits).data();
        let mut row = vec![0.0; bins];
        for b in 0..n {
            for (k, r) in row.iter_mut().enumerate() {
                *r = lv[((b * bins + k) * groups + g) * plane + i * w + j];
            }
            x.set(b, g, i, j, draw(&row, temperature, rng::unit(rng)) as u16);
        }
    }
    Ok(x)
}

/// Effective (masked) weights of one convolution, flattened.
struct Kernel {
    weight: Vec<f64>,
    bias: Vec<f64>,
    dims: (usize, usize, usize, usize),
}

impl Kernel {
    fn of(conv: &crate::nn::Conv2d) -> Self {
        let s = conv.weight.value.shape();
        Kernel { weight: conv.effective_weight(), bias: conv.bias.value.data().to_vec(), dims: (s[0], s[1], s[2], s[3]) }
    }
}

/// Buffered sampler: keeps every block's activations and only evaluates the
/// convolutions at the position being sampled, so one step costs
/// `O(layers · kernel² · hidden²)` regardless of image size.
pub struct IncrementalSampler<'a> {
    net: &'a AutoregressiveNet,
    cond: Option<&'a Tensor>,
    image: IntTensor,
    /// Block outputs `[N, hidden, H, W]`, one per block.
    buffers: Vec<Vec<f64>>,
    gates: Vec<Kernel>,
    projs: Vec<Kernel>,
    head: Kernel,
}

impl<'a> IncrementalSampler<'a> {
    pub fn new(net: &'a AutoregressiveNet, cond: Option<&'a Tensor>, n: usize, h: usize, w: usize) -> Result<Self> {
        check_cond(net, cond, n, h, w)?;
        let hidden = net.config.hidden;
        Ok(IncrementalSampler {
            net,
            cond,
            image: IntTensor::zeros([n, net.config.groups, h, w]),
            buffers: net.blocks.iter().map(|_| vec![0.0; n * hidden * h * w]).collect(),
            gates: net.blocks.iter().map(|b| Kernel::of(&b.gates)).collect(),
            projs: net.blocks.iter().map(|b| Kernel::of(&b.proj)).collect(),
            head: Kernel::of(&net.head),
        })
    }

    pub fn order(&self) -> super::RasterOrder {
        self.net.raster(self.image.height(), self.image.width())
    }

    pub fn image(&self) -> &IntTensor {
        &self.image
    }

    pub fn into_image(self) -> IntTensor {
        self.image
    }

    /// Buffered output of block `l` as `[N, hidden, H, W]`.
    pub fn buffer(&self, l: usize) -> &[f64] {
        &self.buffers[l]
    }

    fn cond_at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        match self.cond {
            None => 0.0,
            Some(t) => {
                let s = t.shape();
                let (n, i, j) = (if s[0] == 1 { 0 } else { n }, if s[2] == 1 { 0 } else { i }, if s[3] == 1 { 0 } else { j });
                t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]
            }
        }
    }

    /// Recomputes every block and the head at `(i, j)` for item `b` and
    /// returns the logits of group `g`.
    fn logits_at(&mut self, b: usize, i: usize, j: usize, g: usize) -> Vec<f64> {
        let [n, groups, h, w] = self.image.shape();
        debug_assert!(b < n);
        let bins = self.net.config.bins;
        let hidden = self.net.config.hidden;
        let plane = h * w;
        let img = &self.image;
        let onehot = |ci: usize, iy: usize, ix: usize| -> f64 {
            let (grp, v) = (ci / bins, ci % bins);
            f64::from(img.get(b, grp, iy, ix) as usize == v)
        };
        let mut pre = vec![0.0; 2 * hidden];
        let mut gated = vec![0.0; hidden];
        let mut proj = vec![0.0; hidden];
        for l in 0..self.buffers.len() {
            let k = &self.gates[l];
            if l == 0 {
                conv_at(&k.weight, &k.bias, k.dims, (h, w), (i, j), onehot, &mut pre);
            } else {
                let prev = &self.buffers[l - 1];
                let read = |ci: usize, iy: usize, ix: usize| prev[(b * hidden + ci) * plane + iy * w + ix];
                conv_at(&k.weight, &k.bias, k.dims, (h, w), (i, j), read, &mut pre);
            }
            for (c, p) in pre.iter_mut().enumerate() {
                *p += self.cond_at(b, l * 2 * hidden + c, i, j);
            }
            for c in 0..hidden {
                gated[c] = UnaryKind::Tanh.apply(pre[c]) * UnaryKind::Sigmoid.apply(pre[hidden + c]);
            }
            let k = &self.projs[l];
            conv_at(&k.weight, &k.bias, k.dims, (1, 1), (0, 0), |ci, _, _| gated[ci], &mut proj);
            for c in 0..hidden {
                let at = (b * hidden + c) * plane + i * w + j;
                let residual = if l > 0 { self.buffers[l - 1][at] } else { 0.0 };
                self.buffers[l][at] = residual + proj[c];
            }
        }
        let mut out = vec![0.0; bins * groups];
        let k = &self.head;
        match self.buffers.last() {
            Some(last) => {
                let read = |ci: usize, _: usize, _: usize| UnaryKind::Relu.apply(last[(b * hidden + ci) * plane + i * w + j]);
                conv_at(&k.weight, &k.bias, k.dims, (1, 1), (0, 0), read, &mut out);
            }
            None => {
                let read = |ci: usize, _: usize, _: usize| onehot(ci, i, j);
                conv_at(&k.weight, &k.bias, k.dims, (1, 1), (0, 0), read, &mut out);
            }
        }
        (0..bins).map(|v| out[v * groups + g]).collect()
    }

    /// Samples raster position `t` for every batch item.
    pub fn step(&mut self, t: usize, temperature: f64, rng: &mut Rng) -> Result<()> {
        let order = self.order();
        if t >= order.len() {
            return Err(Error::IndexOutOfRange { op: "sampler step", index: t, limit: order.len() });
        }
        let (i, j, g) = order.position(t);
        for b in 0..self.image.batch() {
            let logits = self.logits_at(b, i, j, g);
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "sampler logits" });
            }
            let v = draw(&logits, temperature, rng::unit(rng));
            self.image.set(b, g, i, j, v as u16);
        }
        Ok(())
    }

    /// Largest difference between the buffers and a fresh forward pass over
    /// the current partial image, at every raster position up to step `t`.
    /// At the position of `t` itself only hidden channels of groups `<= g`
    /// are compared; later groups there are recomputed by the next step.
    pub fn cache_error(&self, t: usize) -> Result<f64> {
        let order = self.order();
        let (ti, tj, tg) = order.position(t);
        let groups = order.groups;
        let [n, _, h, w] = self.image.shape();
        let mut tape = Tape::new();
        let cond = self.cond.map(|c| tape.constant(c.clone()));
        let traced = self.net.forward_traced(&mut tape, &self.image, cond)?;
        let hidden = self.net.config.hidden;
        let mut worst = 0.0f64;
        for (l, &v) in traced.block_outputs.iter().enumerate() {
            let fresh = tape.value(v).data();
            for b in 0..n {
                for c in 0..hidden {
                    let last = ti * w + tj;
                    let upto = if c * groups / hidden <= tg { last } else { last.saturating_sub(1) };
                    if c * groups / hidden > tg && last == 0 {
                        continue;
                    }
                    for p in 0..=upto {
                        let at = (b * hidden + c) * h * w + p;
                        worst = worst.max((fresh[at] - self.buffers[l][at]).abs());
                    }
                }
            }
        }
        Ok(worst)
    }
}
