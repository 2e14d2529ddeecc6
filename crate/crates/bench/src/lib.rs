//! Fixtures and timing helpers shared by the criterion benches and the
//! `sampler_speedup` binary.

use std::time::Instant;

use pixelstack::pixelcnn::{sample, AutoregressiveNet, PixelCnnConfig, SampleMode, SamplerConfig};
use pixelstack::rng;
use pixelstack::{Result, Tensor};

/// A randomly initialized net with 3-bit single-channel pixels.
pub fn random_net(layers: usize, hidden: usize, seed: u64) -> Result<AutoregressiveNet> {
    let mut r = rng::seeded(seed);
    AutoregressiveNet::new("bench", PixelCnnConfig::new(layers, hidden, 8, 1), &mut r)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng::normal(&mut r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub layers: usize,
    pub hidden: usize,
    pub size: usize,
    pub batch: usize,
    pub naive_seconds: f64,
    pub incremental_seconds: f64,
}

impl SpeedupRow {
    pub fn speedup(&self) -> f64 {
        self.naive_seconds / self.incremental_seconds
    }

    pub fn header() -> [&'static str; 7] {
        ["layers", "hidden", "size", "batch", "naive_seconds", "incremental_seconds", "speedup"]
    }

    pub fn record(&self) -> Vec<String> {
        vec![
            self.layers.to_string(),
            self.hidden.to_string(),
            self.size.to_string(),
            self.batch.to_string(),
            format!("{:.6}", self.naive_seconds),
            format!("{:.6}", self.incremental_seconds),
            format!("{:.3}", self.speedup()),
        ]
    }
}

/// Best-of-`reps` wall clock for both sampling modes on one `size × size`
/// batch. Fails if the two modes disagree, since the timing would then
/// compare different work.
pub fn sampler_speedup(layers: usize, hidden: usize, size: usize, batch: usize, reps: usize) -> Result<SpeedupRow> {
    let net = random_net(layers, hidden, 7)?;
    let time = |mode| -> Result<(f64, _)> {
        let cfg = SamplerConfig { mode, ..SamplerConfig::default() };
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            let x = sample(&net, None, batch, size, size, &cfg)?;
            best = best.min(start.elapsed().as_secs_f64());
            out = Some(x);
        }
        Ok((best, out.unwrap()))
    };
    let (naive_seconds, a) = time(SampleMode::Naive)?;
    let (incremental_seconds, b) = time(SampleMode::Incremental)?;
    if a != b {
        return Err(pixelstack::Error::InvalidArgument("naive and incremental samples differ".into()));
    }
    Ok(SpeedupRow { layers, hidden, size, batch, naive_seconds, incremental_seconds })
}
