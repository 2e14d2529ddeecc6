//! Teacher-forcing pathology: an autoregressive autoencoder trained end to
//! end reaches low teacher-forced NLL yet its sampled reconstructions drift
//! in global intensity; an encoder trained through an auxiliary decoder
//! keeps that information in the codes.

use crate::auxiliary::{train_end_to_end_baseline, AuxKind, BaselineConfig, EndToEnd};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{mean_intensity, train_level, Geometry, LevelSpec, TrainedLevel};
use crate::pixelcnn::{bits_per_dim, SamplerConfig};
use crate::rng;
use crate::stats::mean_std;
use crate::tensor::IntTensor;
use crate::train::TrainConfig;

/// `|mean(original) − mean(reconstruction)|` per image, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub baseline: Vec<f64>,
    pub aux: Vec<f64>,
    /// Teacher-forced NLL in bits/dim on the same images.
    pub baseline_nll_bits: f64,
    pub aux_nll_bits: f64,
}

impl DriftReport {
    pub fn baseline_stats(&self) -> (f64, f64) {
        mean_std(&self.baseline)
    }

    pub fn aux_stats(&self) -> (f64, f64) {
        mean_std(&self.aux)
    }

    /// The trend: the baseline drifts at least as much as the aux model.
    pub fn trend_held(&self) -> bool {
        self.baseline_stats().0 >= self.aux_stats().0
    }

    /// Header and rows: one per image, then `mean` and `stdev`.
    pub fn csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["image", "baseline_drift", "aux_drift"].map(String::from).to_vec();
        let mut rows: Vec<Vec<String>> = self.baseline.iter().zip(&self.aux).enumerate().map(|(i, (b, a))| vec![i.to_string(), b.to_string(), a.to_string()]).collect();
        let ((bm, bs), (am, as_)) = (self.baseline_stats(), self.aux_stats());
        rows.push(vec!["mean".into(), bm.to_string(), am.to_string()]);
        rows.push(vec!["stdev".into(), bs.to_string(), as_.to_string()]);
        rows.push(vec!["teacher_forced_nll_bits_per_dim".into(), self.baseline_nll_bits.to_string(), self.aux_nll_bits.to_string()]);
        (header, rows)
    }
}

pub fn drift(original: &IntTensor, reconstruction: &IntTensor, bins: usize) -> Vec<f64> {
    mean_intensity(original, bins).iter().zip(mean_intensity(reconstruction, bins)).map(|(a, b)| (a - b).abs()).collect()
}

/// Baseline with the same encoder, codebook, decoder and modulator sizes
/// as the aux-trained level.
pub fn matched_baseline(spec: &LevelSpec, input: Geometry) -> BaselineConfig {
    BaselineConfig {
        encoder: spec.encoder_config(input),
        vq: spec.vq_config(),
        decoder: spec.decoder_config(input),
        mod_layers: spec.modulator_layers,
        mod_width: spec.modulator_width,
    }
}

pub struct PathologyOutcome {
    pub report: DriftReport,
    pub originals: IntTensor,
    pub baseline_recon: IntTensor,
    pub aux_recon: IntTensor,
    pub baseline: EndToEnd,
    pub aux: TrainedLevel,
}

/// Trains both models on `data` and reconstructs its first `count` images.
pub fn run_pathology(data: &Dataset, spec: &LevelSpec, train: &TrainConfig, count: usize, sampler: &SamplerConfig, seed: u64) -> Result<PathologyOutcome> {
    if count == 0 || count > data.len() {
        return Err(Error::InvalidArgument(format!("need 1..={} images to reconstruct, got {count}", data.len())));
    }
    let spec = LevelSpec { aux: crate::auxiliary::AuxConfig { kind: AuxKind::FeedForward, ..spec.aux }, ..*spec };
    let input = Geometry::of(data);
    let (baseline, _) = train_end_to_end_baseline(data, &matched_baseline(&spec, input), &TrainConfig { steps: spec.steps.unwrap_or(train.steps), ..*train }, rng::derive(seed, 1))?;
    let (aux, _) = train_level(data, 1, &spec, train, rng::derive(seed, 2))?;
    let x = data.images.select(&(0..count).collect::<Vec<_>>());
    let baseline_recon = baseline.reconstruct(&x, sampler)?;
    let codes = aux.encode(&x)?;
    let mut r = rng::seeded(sampler.seed);
    let aux_recon = aux.decode(&codes, sampler, &mut r)?;
    let dims = (count * x.item_len()) as f64;
    let baseline_nll_bits = bits_per_dim(baseline.nll_per_item(&x)?.iter().sum::<f64>() / dims);
    let aux_nll_bits = bits_per_dim(aux.nll_per_item(&x, &codes)?.iter().sum::<f64>() / dims);
    let bins = data.bins();
    let report = DriftReport { baseline: drift(&x, &baseline_recon, bins), aux: drift(&x, &aux_recon, bins), baseline_nll_bits, aux_nll_bits };
    Ok(PathologyOutcome { report, originals: x, baseline_recon, aux_recon, baseline, aux })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_textures;

    #[test]
    fn drift_is_absolute_mean_difference() {
        let a = IntTensor::new([2, 1, 1, 2], vec![0, 2, 3, 3]).unwrap();
        let b = IntTensor::new([2, 1, 1, 2], vec![2, 2, 0, 3]).unwrap();
        let d = drift(&a, &b, 4);
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        assert_eq!(drift(&a, &a, 4), vec![0.0, 0.0]);
    }

    #[test]
    fn report_csv_layout() {
        let r = DriftReport { baseline: vec![0.5, 0.25], aux: vec![0.0, 0.25], baseline_nll_bits: 1.0, aux_nll_bits: 2.0 };
        let (h, rows) = r.csv();
        assert_eq!(h, ["image", "baseline_drift", "aux_drift"]);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2], ["mean", "0.375", "0.125"]);
        assert!(r.trend_held());
    }

    #[test]
    fn pathology_runs_end_to_end() {
        let d = synth_textures(12, 8, 8, 2, 2, 5).unwrap();
        let spec = LevelSpec {
            encoder_layers: 1,
            encoder_width: 8,
            decoder_layers: 2,
            decoder_hidden: 8,
            modulator_layers: 1,
            modulator_width: 8,
            code_bits: 2,
            code_dim: 4,
            ..Default::default()
        };
        let train = TrainConfig { steps: 4, batch: 4, lr: 1e-3, polyak: 0.0, log_every: 0 };
        let out = run_pathology(&d, &spec, &train, 3, &SamplerConfig::default(), 1).unwrap();
        assert_eq!(out.report.baseline.len(), 3);
        assert!(out.report.baseline.iter().chain(&out.report.aux).all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.baseline_recon.shape(), out.originals.shape());
        assert!(run_pathology(&d, &spec, &train, 0, &SamplerConfig::default(), 1).is_err());
    }
}
