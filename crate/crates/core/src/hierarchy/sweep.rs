//! Code predictability: train an encoder per setting, fit a fixed prior to
//! its codes, and measure validation NLL.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{code_perplexity, encode_dataset, mean_bits_per_value, train_prior, Geometry, LevelSpec, PriorSpec, TrainedLevel};
use crate::auxiliary::{train_encoder, AuxKind, EncoderStack};
use crate::data::{read_csv, write_csv, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::spearman;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Residual blocks of a feed-forward aux decoder.
    AuxDepth,
    /// Side of the masked self-prediction square.
    MaskSide,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::AuxDepth => "aux_depth",
            SweepAxis::MaskSide => "mask_side",
        }
    }

    /// +1 when NLL should grow with the setting, -1 when it should shrink.
    pub fn expected_sign(&self) -> f64 {
        match self {
            SweepAxis::AuxDepth => 1.0,
            SweepAxis::MaskSide => -1.0,
        }
    }

    /// The level spec for one sweep value.
    pub fn apply(&self, base: &LevelSpec, value: usize) -> LevelSpec {
        let mut spec = *base;
        match self {
            SweepAxis::AuxDepth => {
                spec.aux.kind = AuxKind::FeedForward;
                spec.aux.layers = value;
            }
            SweepAxis::MaskSide => {
                spec.aux.kind = AuxKind::Msp;
                spec.aux.mask_side = value;
            }
        }
        spec
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux_depth" => Ok(SweepAxis::AuxDepth),
            "mask_side" => Ok(SweepAxis::MaskSide),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis {s:?} (expected aux_depth or mask_side)"))),
        }
    }
}

/// Everything held fixed across a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepSettings {
    pub level: LevelSpec,
    pub prior: PriorSpec,
    pub encoder_train: TrainConfig,
    pub prior_train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: usize,
    pub perplexity: f64,
    pub nll_bits_per_position: f64,
}

/// Trains an encoder with `spec` on pixels, a prior on its training-split
/// codes, and reports validation NLL of the codes.
pub fn predictability(data: &Dataset, spec: &LevelSpec, settings: &SweepSettings, setting: usize) -> Result<SweepRow> {
    let input = Geometry::of(data);
    let mut stack = EncoderStack::new("l1.", 1, spec.encoder_config(input), spec.vq_config(), spec.aux, &mut rng::seeded(rng::derive(settings.seed, 1)))?;
    train_encoder(&mut stack, data, &TrainConfig { steps: spec.steps.unwrap_or(settings.encoder_train.steps), ..settings.encoder_train }, rng::derive(settings.seed, 2))?;
    let (encoder, codebook) = stack.into_retained();
    let (level, _) = TrainedLevel::build(1, spec, input, false, &mut rng::seeded(0))?;
    let level = TrainedLevel { encoder, codebook, ..level };
    let codes = encode_dataset(&level, data)?;
    let (train, validation) = codes.split_hashed();
    if validation.is_empty() {
        return Err(Error::InvalidArgument("dataset too small for a validation split".into()));
    }
    let unconditional = PriorSpec { conditional: false, ..settings.prior };
    let (prior, _) = train_prior(&train, &unconditional, &settings.prior_train, rng::derive(settings.seed, 3))?;
    Ok(SweepRow { setting, perplexity: code_perplexity(&codes), nll_bits_per_position: mean_bits_per_value(&prior, &validation, false)? })
}

/// One row per value; settings run in parallel and share one seed.
pub fn code_predictability_sweep(data: &Dataset, axis: SweepAxis, values: &[usize], settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    values.par_iter().map(|&v| predictability(data, &axis.apply(&settings.level, v), settings, v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrendCheck {
    pub rho: f64,
    pub held: bool,
}

/// Spearman correlation between setting and NLL, held when
/// `sign · ρ ≥ 0.9`. Fewer than three points is an error.
pub fn check_trend(axis: SweepAxis, rows: &[SweepRow]) -> Result<TrendCheck> {
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!("a trend needs at least 3 sweep points, got {}", rows.len())));
    }
    let x: Vec<f64> = rows.iter().map(|r| r.setting as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.nll_bits_per_position).collect();
    let rho = spearman(&x, &y);
    Ok(TrendCheck { rho, held: axis.expected_sign() * rho >= 0.9 })
}

pub const SWEEP_COLUMNS: [&str; 3] = ["setting", "perplexity", "nll_bits_per_position"];

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let records: Vec<Vec<String>> = rows.iter().map(|r| vec![r.setting.to_string(), r.perplexity.to_string(), r.nll_bits_per_position.to_string()]).collect();
    write_csv(path, &SWEEP_COLUMNS, &records)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("{}: missing column {name}", path.display())));
    let (s, p, n) = (col("setting")?, col("perplexity")?, col("nll_bits_per_position")?);
    let parse = |v: &str, what: &str| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("{}: bad {what} value {v:?}", path.display())));
    rows.iter()
        .map(|r| {
            let get = |i: usize| r.get(i).map(String::as_str).unwrap_or("");
            Ok(SweepRow {
                setting: get(s).trim().parse().map_err(|_| Error::Config(format!("{}: bad setting {:?}", path.display(), get(s))))?,
                perplexity: parse(get(p), "perplexity")?,
                nll_bits_per_position: parse(get(n), "nll")?,
            })
        })
        .collect()
}
