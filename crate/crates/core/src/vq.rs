//! Vector quantization: nearest-codebook assignment, straight-through
//! gradients, commitment loss and an exponentially smoothed K-means
//! codebook.
//!
//! An encoder output `z: [N, C·d, H, W]` holds `C` code channels of
//! dimension `d`; all channels share one codebook of `k` vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{IntTensor, Module, Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub k: usize,
    pub d: usize,
    /// Commitment weight.
    pub beta: f64,
    pub ema: bool,
    pub gamma: f64,
    pub epsilon: f64,
    /// Reseed codes with no recent assignments every this many updates; 0 disables.
    pub reseed_every: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { k: 16, d: 8, beta: 0.25, ema: true, gamma: 0.99, epsilon: 1e-5, reseed_every: 0 }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.k > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!("codebook needs 1 <= k <= 65536 and d >= 1, got k={} d={}", self.k, self.d)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!("commitment weight must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("EMA needs gamma in [0, 1) and epsilon > 0, got {} / {}", self.gamma, self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Codebook {
    pub config: VqConfig,
    /// `e: [k, d]`.
    pub embeddings: Parameter,
    /// EMA assignment counts `N: [k]`.
    pub counts: Parameter,
    /// EMA assignment sums `m: [k, d]`.
    pub sums: Parameter,
    pub initialized: bool,
    updates: u64,
}

/// Output of [`Codebook::quantize`].
#[derive(Clone, Debug)]
pub struct Quantized {
    /// Code index per position and code channel, `[N, C, H, W]`.
    pub indices: IntTensor,
    /// `z′`, the selected embeddings, laid out like `z`.
    pub quantized: Tensor,
    pub commitment: f64,
    pub perplexity: f64,
}

/// Differentiable quantization output on a tape.
#[derive(Clone, Debug)]
pub struct VqOutput {
    /// Forward value `z′`, gradient passed straight through to `z`.
    pub z_st: Var,
    pub commitment: Var,
    /// Codebook term; `None` when the codebook is learned by EMA.
    pub codebook: Option<Var>,
    pub indices: IntTensor,
    pub perplexity: f64,
}

impl Codebook {
    /// Codebook with parameters named `{prefix}vq.e`, `{prefix}vq.N`, `{prefix}vq.m`.
    pub fn new(prefix: &str, config: VqConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let VqConfig { k, d, .. } = config;
        let e = Tensor::from_fn(vec![k, d], |_| rng::normal(rng));
        let mut embeddings = Parameter::new(format!("{prefix}vq.e"), e.clone());
        embeddings.trainable = !config.ema;
        Ok(Codebook {
            config,
            embeddings,
            counts: Parameter::buffer(format!("{prefix}vq.N"), Tensor::full(vec![k], 1.0)),
            sums: Parameter::buffer(format!("{prefix}vq.m"), e),
            initialized: false,
            updates: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn split(&self, z: &Tensor) -> Result<[usize; 5]> {
        let [n, cd, h, w] = z.dims4()?;
        let d = self.d();
        if cd % d != 0 {
            return Err(Error::shape("quantize", format!("{cd} channels is not a multiple of code dimension {d}")));
        }
        Ok([n, cd / d, d, h, w])
    }

    /// Every code vector of `z` as a row of `d` values.
    pub fn vectors(&self, z: &Tensor) -> Result<Vec<Vec<f64>>> {
        let [n, c, d, h, w] = self.split(z)?;
        let plane = h * w;
        let data = z.data();
        let mut out = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out.push((0..d).map(|j| data[((b * c + ch) * d + j) * plane + p]).collect());
                }
            }
        }
        Ok(out)
    }

    /// Seeds the codebook from a batch of encoder outputs by k-means++
    /// (D²-weighted) sampling of `k` vectors. EMA statistics restart at
    /// `N = 1`, `m = e`.
    pub fn init_from(&mut self, z: &Tensor, rng: &mut Rng) -> Result<()> {
        let vectors = self.vectors(z)?;
        let (k, d) = (self.k(), self.d());
        let mut chosen: Vec<&Vec<f64>> = Vec::with_capacity(k);
        chosen.push(&vectors[rng::below(rng, vectors.len() as u64) as usize]);
        let mut dist: Vec<f64> = vectors.iter().map(|v| sq_dist(v, chosen[0])).collect();
        while chosen.len() < k {
            let total: f64 = dist.iter().sum();
            let pick = if total > 0.0 {
                let target = rng::unit(rng) * total;
                let mut acc = 0.0;
                dist.iter().position(|&x| {
                    acc += x;
                    target < acc
                }).unwrap_or(vectors.len() - 1)
            } else {
                rng::below(rng, vectors.len() as u64) as usize
            };
            chosen.push(&vectors[pick]);
            for (dv, v) in dist.iter_mut().zip(&vectors) {
                *dv = dv.min(sq_dist(v, &vectors[pick]));
            }
        }
        let e = self.embeddings.value.data_mut();
        for (j, v) in chosen.iter().enumerate() {
            e[j * d..(j + 1) * d].copy_from_slice(v);
        }
        self.sums.value.data_mut().copy_from_slice(self.embeddings.value.data());
        self.counts.value.data_mut().fill(1.0);
        self.initialized = true;
        Ok(())
    }

    /// Index of the nearest embedding; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let d = self.d();
        let e = self.embeddings.value.data();
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k() {
            let dist = sq_dist(v, &e[j * d..(j + 1) * d]);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best.0
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let [n, c, d, h, w] = self.split(z)?;
        let plane = h * w;
        let data = z.data();
        let e = self.embeddings.value.data();
        let mut indices = IntTensor::zeros([n, c, h, w]);
        let mut quantized = vec![0.0; data.len()];
        let mut v = vec![0.0; d];
        let mut sq = 0.0;
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    for (j, vj) in v.iter_mut().enumerate() {
                        *vj = data[((b * c + ch) * d + j) * plane + p];
                    }
                    let code = self.nearest(&v);
                    indices.data_mut()[(b * c + ch) * plane + p] = code as u16;
                    for j in 0..d {
                        let q = e[code * d + j];
                        quantized[((b * c + ch) * d + j) * plane + p] = q;
                        sq += (v[j] - q) * (v[j] - q);
                    }
                }
            }
        }
        let perplexity = perplexity(indices.data(), self.k());
        Ok(Quantized { indices, quantized: Tensor::new(z.shape().to_vec(), quantized)?, commitment: sq / data.len() as f64, perplexity })
    }

    /// Embeddings for given indices, laid out as `[N, C·d, H, W]`.
    pub fn lookup(&self, indices: &IntTensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let table = tape.constant(self.embeddings.value.clone());
        let z = tape.gather_codes(table, &indices.to_indices(), indices.shape())?;
        Ok(tape.value(z).clone())
    }

    /// Quantizes `z` on the tape. The commitment term pulls `z` toward the
    /// (constant) selected embeddings; the codebook term, present only when
    /// EMA is off, pulls the embeddings toward the (constant) `z`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<VqOutput> {
        let q = self.quantize(tape.value(z))?;
        let zq = tape.constant(q.quantized.clone());
        let commitment = tape.mse(z, zq)?;
        let codebook = if self.config.ema {
            None
        } else {
            let table = tape.param(&self.embeddings);
            let gathered = tape.gather_codes(table, &q.indices.to_indices(), q.indices.shape())?;
            let zc = tape.stop_gradient(z);
            Some(tape.mse(gathered, zc)?)
        };
        let z_st = tape.straight_through(z, q.quantized)?;
        Ok(VqOutput { z_st, commitment, codebook, indices: q.indices, perplexity: q.perplexity })
    }

    /// `recon + codebook·[not EMA] + β·commitment`.
    pub fn loss(&self, tape: &mut Tape, recon: Var, out: &VqOutput) -> Result<Var> {
        let mut total = recon;
        if let Some(cb) = out.codebook {
            total = tape.add(total, cb)?;
        }
        if self.config.beta != 0.0 {
            let c = tape.scale(out.commitment, self.config.beta)?;
            total = tape.add(total, c)?;
        }
        Ok(total)
    }

    /// One EMA K-means step from a batch of encoder outputs and their codes.
    pub fn ema_update(&mut self, z: &Tensor, indices: &IntTensor, rng: &mut Rng) -> Result<()> {
        if !self.config.ema {
            return Err(Error::InvalidArgument("ema_update on a gradient-trained codebook".into()));
        }
        let vectors = self.vectors(z)?;
        if vectors.len() != indices.data().len() {
            return Err(Error::shape("ema_update", format!("{} vectors for {} indices", vectors.len(), indices.data().len())));
        }
        let (k, d) = (self.k(), self.d());
        let VqConfig { gamma, epsilon, .. } = self.config;
        let mut count = vec![0.0; k];
        let mut sum = vec![0.0; k * d];
        for (v, &code) in vectors.iter().zip(indices.data()) {
            let code = code as usize;
            if code >= k {
                return Err(Error::IndexOutOfRange { op: "ema_update", index: code, limit: k });
            }
            count[code] += 1.0;
            for j in 0..d {
                sum[code * d + j] += v[j];
            }
        }
        let n = self.counts.value.data_mut();
        for (nj, cj) in n.iter_mut().zip(&count) {
            *nj = gamma * *nj + (1.0 - gamma) * cj;
        }
        let m = self.sums.value.data_mut();
        for (mj, sj) in m.iter_mut().zip(&sum) {
            *mj = gamma * *mj + (1.0 - gamma) * sj;
        }
        self.updates += 1;
        if self.config.reseed_every > 0 && self.updates % self.config.reseed_every == 0 {
            self.reseed_dead(&vectors, rng);
        }
        let n = self.counts.value.data();
        let m = self.sums.value.data();
        let e = self.embeddings.value.data_mut();
        for j in 0..k {
            let denom = n[j].max(epsilon);
            for t in 0..d {
                e[j * d + t] = m[j * d + t] / denom;
            }
        }
        Ok(())
    }

    /// Moves codes whose EMA count fell below 1% of a uniform share onto
    /// random batch vectors.
    fn reseed_dead(&mut self, vectors: &[Vec<f64>], rng: &mut Rng) {
        let (k, d) = (self.k(), self.d());
        let total: f64 = self.counts.value.data().iter().sum();
        let floor = 0.01 * total / k as f64;
        for j in 0..k {
            if self.counts.value.data()[j] < floor {
                let v = &vectors[rng::below(rng, vectors.len() as u64) as usize];
                let nj = self.config.epsilon.max(self.counts.value.data()[j]);
                for t in 0..d {
                    self.sums.value.data_mut()[j * d + t] = v[t] * nj;
                }
            }
        }
    }

    /// Largest `|e[j]·max(N[j], ε) − m[j]|`.
    pub fn ema_residual(&self) -> f64 {
        let d = self.d();
        let (e, n, m) = (self.embeddings.value.data(), self.counts.value.data(), self.sums.value.data());
        (0..e.len()).map(|i| (e[i] * n[i / d].max(self.config.epsilon) - m[i]).abs()).fold(0.0, f64::max)
    }
}

impl Module for Codebook {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.embeddings);
        f(&self.counts);
        f(&self.sums);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.embeddings);
        f(&mut self.counts);
        f(&mut self.sums);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(H)` of the empirical code histogram.
pub fn perplexity(indices: &[u16], k: usize) -> f64 {
    if indices.is_empty() {
        return 1.0;
    }
    let mut hist = vec![0usize; k.max(1)];
    for &i in indices {
        if (i as usize) < hist.len() {
            hist[i as usize] += 1;
        }
    }
    let n = indices.len() as f64;
    let h: f64 = hist.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Adam;
    use proptest::prelude::*;

    fn book(rows: &[[f64; 2]], ema: bool) -> Codebook {
        let cfg = VqConfig { k: rows.len(), d: 2, ema, ..Default::default() };
        let mut cb = Codebook::new("", cfg, &mut rng::seeded(0)).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        cb.embeddings.value.data_mut().copy_from_slice(&flat);
        cb.sums.value.data_mut().copy_from_slice(&flat);
        cb
    }

    fn point(v: [f64; 2]) -> Tensor {
        Tensor::new(vec![1, 2, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_neighbour_and_ties() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]], true);
        let q = cb.quantize(&point([0.9, 0.8])).unwrap();
        assert_eq!(q.indices.data(), &[1]);
        assert_eq!(q.quantized.data(), &[1.0, 1.0]);
        assert_eq!(cb.quantize(&point([0.5, 0.5])).unwrap().indices.data(), &[0]);
        assert_eq!(cb.quantize(&point([0.0, 0.0])).unwrap().commitment, 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = book(&[[0.0, 0.0]], true);
        assert!(cb.quantize(&Tensor::zeros(vec![1, 3, 1, 1])).is_err());
    }

    #[test]
    fn loss_terms_hand_values() {
        // z = [0.5], e = [1.0], β = 0.25
        let cfg = VqConfig { k: 1, d: 1, beta: 0.25, ema: false, ..Default::default() };
        let mut cb = Codebook::new("", cfg, &mut rng::seeded(0)).unwrap();
        cb.embeddings.value.data_mut()[0] = 1.0;
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::full(vec![1, 1, 1, 1], 0.5));
        let out = cb.forward(&mut tape, z).unwrap();
        assert_eq!(tape.value(out.codebook.unwrap()).item(), 0.25);
        let beta_term = 0.25 * tape.value(out.commitment).item();
        assert_eq!(beta_term, 0.0625);
        let zero = tape.constant(Tensor::scalar(0.0));
        let total = cb.loss(&mut tape, zero, &out).unwrap();
        assert!((tape.value(total).item() - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn ema_codebook_has_no_codebook_term() {
        let cb = book(&[[0.0, 0.0]], true);
        let mut tape = Tape::new();
        let z = tape.variable(point([0.3, 0.4]));
        let out = cb.forward(&mut tape, z).unwrap();
        assert!(out.codebook.is_none());
        let zero = tape.constant(Tensor::scalar(0.0));
        let cfg0 = Codebook { config: VqConfig { beta: 0.0, ..cb.config }, ..cb.clone() };
        let total = cfg0.loss(&mut tape, zero, &out).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
    }

    #[test]
    fn straight_through_gradients() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0], [-1.0, 2.0]], false);
        let zt = Tensor::new(vec![1, 2, 1, 3], vec![0.2, 0.9, -0.7, 0.1, 0.8, 1.6]).unwrap();
        let target = Tensor::new(vec![1, 2, 1, 3], vec![0.5, -0.2, 0.3, 1.0, 0.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let z = tape.variable(zt.clone());
        let out = cb.forward(&mut tape, z).unwrap();
        let t = tape.constant(target);
        let loss = tape.mse(out.z_st, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap(), grads.get(out.z_st).unwrap());
        // no downstream gradient reaches the codebook through z_st
        assert!(grads.param(cb.embeddings.key()).is_none());
    }

    #[test]
    fn commitment_gradient_matches_finite_differences() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]], true);
        let beta = 0.25;
        let zt = Tensor::new(vec![1, 2, 1, 2], vec![0.2, 0.9, 0.3, 0.6]).unwrap();
        let mut tape = Tape::new();
        let z = tape.variable(zt.clone());
        let out = cb.forward(&mut tape, z).unwrap();
        let scaled = tape.scale(out.commitment, beta).unwrap();
        let g = tape.backward(scaled).unwrap().get(z).unwrap().clone();
        let zq = cb.quantize(&zt).unwrap().quantized;
        let f = |v: &Tensor| -> f64 {
            beta * v.data().iter().zip(zq.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.numel() as f64
        };
        let h = 1e-6;
        for i in 0..zt.numel() {
            let (mut p, mut m) = (zt.clone(), zt.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let closed = 2.0 * beta * (zt.data()[i] - zq.data()[i]) / zt.numel() as f64;
            assert!((g.data()[i] - fd).abs() < 1e-8);
            assert!((g.data()[i] - closed).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_with_zero_decay_is_a_kmeans_step() {
        let mut cb = book(&[[0.0, 0.0], [5.0, 5.0], [9.0, 9.0]], true);
        cb.config.gamma = 0.0;
        let z = Tensor::new(vec![1, 2, 1, 3], vec![0.2, 0.4, 4.0, 0.0, -0.2, 6.0]).unwrap();
        let q = cb.quantize(&z).unwrap();
        cb.ema_update(&z, &q.indices, &mut rng::seeded(0)).unwrap();
        let e = cb.embeddings.value.data();
        assert!((e[0] - 0.3).abs() < 1e-12 && (e[1] - -0.1).abs() < 1e-12);
        assert_eq!(&e[2..4], &[4.0, 6.0]);
        // code 2 got nothing: N = 0 so e = m / ε with m = 0
        assert_eq!(&e[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn dead_code_decays_but_stays_put() {
        let mut cb = book(&[[0.0, 0.0], [9.0, 9.0]], true);
        let z = point([0.1, 0.1]);
        let q = cb.quantize(&z).unwrap();
        cb.ema_update(&z, &q.indices, &mut rng::seeded(0)).unwrap();
        let e = cb.embeddings.value.data();
        assert!((e[2] - 9.0).abs() < 1e-12 && (e[3] - 9.0).abs() < 1e-12);
        assert!((cb.counts.value.data()[1] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn ema_recovers_three_clusters() {
        let means = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let mut r = rng::seeded(11);
        let batch = |r: &mut rng::Rng| {
            let mut data = vec![0.0; 2 * 256];
            for p in 0..256 {
                let c = rng::below(r, 3) as usize;
                data[p] = means[c][0] + 0.05 * rng::normal(r);
                data[256 + p] = means[c][1] + 0.05 * rng::normal(r);
            }
            Tensor::new(vec![1, 2, 16, 16], data).unwrap()
        };
        let cfg = VqConfig { k: 3, d: 2, gamma: 0.99, ema: true, ..Default::default() };
        let mut cb = Codebook::new("", cfg, &mut r).unwrap();
        let first = batch(&mut r);
        cb.init_from(&first, &mut r).unwrap();
        for _ in 0..200 {
            let z = batch(&mut r);
            let q = cb.quantize(&z).unwrap();
            cb.ema_update(&z, &q.indices, &mut r).unwrap();
            assert!(cb.ema_residual() < 1e-12);
        }
        let e = cb.embeddings.value.data();
        let mut matched = [false; 3];
        for j in 0..3 {
            let (best, dist) = means
                .iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(&e[j * 2..j * 2 + 2], m).sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(dist < 0.1, "embedding {j} is {dist} from its nearest mean");
            assert!(!matched[best]);
            matched[best] = true;
        }
    }

    #[test]
    fn gradient_step_moves_embedding_toward_assigned_mean() {
        let mut cb = book(&[[0.0, 0.0], [3.0, 3.0]], false);
        let zt = Tensor::new(vec![1, 2, 1, 3], vec![0.5, 1.0, 3.2, 0.2, -0.4, 2.0]).unwrap();
        let before = cb.embeddings.value.clone();
        let mut tape = Tape::new();
        let z = tape.constant(zt.clone());
        let out = cb.forward(&mut tape, z).unwrap();
        let grads = tape.backward(out.codebook.unwrap()).unwrap();
        cb.accumulate(&grads);
        Adam::new(0.01).unwrap().step(&mut cb);
        let after = cb.embeddings.value.data();
        // code 0 owns (0.5, 0.2) and (1.0, -0.4); code 1 owns (3.2, 2.0)
        let means = [[0.75, -0.1], [3.2, 2.0]];
        for j in 0..2 {
            let step = [after[2 * j] - before.data()[2 * j], after[2 * j + 1] - before.data()[2 * j + 1]];
            let toward = [means[j][0] - before.data()[2 * j], means[j][1] - before.data()[2 * j + 1]];
            assert!(step[0] * toward[0] + step[1] * toward[1] > 0.0);
        }
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(&[2, 2, 2, 2], 4), 1.0);
        assert!((perplexity(&[0, 1, 2, 3], 4) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[0, 1, 0, 1], 8) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reseed_revives_dead_codes() {
        let cfg = VqConfig { k: 2, d: 2, reseed_every: 1, ..Default::default() };
        let mut cb = Codebook::new("", cfg, &mut rng::seeded(0)).unwrap();
        cb.embeddings.value.data_mut().copy_from_slice(&[0.0, 0.0, 100.0, 100.0]);
        cb.sums.value.data_mut().copy_from_slice(&[0.0, 0.0, 100.0, 100.0]);
        cb.counts.value.data_mut().copy_from_slice(&[1.0, 1e-6]);
        let z = Tensor::new(vec![1, 2, 1, 2], vec![0.1, 0.3, 0.2, 0.4]).unwrap();
        let q = cb.quantize(&z).unwrap();
        cb.ema_update(&z, &q.indices, &mut rng::seeded(1)).unwrap();
        let e = cb.embeddings.value.data();
        assert!(e[2] < 1.0 && e[3] < 1.0);
        assert!(cb.ema_residual() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(vals in prop::collection::vec(-3.0f64..3.0, 12), seed in 0u64..100) {
            let cfg = VqConfig { k: 5, d: 2, ..Default::default() };
            let cb = Codebook::new("", cfg, &mut rng::seeded(seed)).unwrap();
            let z = Tensor::new(vec![1, 4, 1, 3], vals).unwrap();
            let q = cb.quantize(&z).unwrap();
            prop_assert!(q.perplexity >= 1.0 - 1e-12 && q.perplexity <= 5.0 + 1e-12);
            let again = cb.quantize(&q.quantized).unwrap();
            prop_assert_eq!(&again.quantized, &q.quantized);
            prop_assert_eq!(again.commitment, 0.0);
            // z′ rows are exactly codebook rows
            prop_assert_eq!(cb.lookup(&q.indices).unwrap(), q.quantized);
        }
    }
}
