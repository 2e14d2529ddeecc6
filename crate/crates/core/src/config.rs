//! Sectioned run configuration in TOML. Unknown keys are errors, and the
//! resolved form (every default filled in) reproduces the run when read back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LevelSpec, PriorSpec};
use crate::pixelcnn::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub polyak: f64,
    pub log_every: usize,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        GlobalConfig { seed: 0, steps: t.steps, lr: t.lr, batch: t.batch, polyak: t.polyak, log_every: t.log_every }
    }
}

impl GlobalConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig { steps: self.steps, batch: self.batch, lr: self.lr, polyak: self.polyak, log_every: self.log_every }
    }
}

/// Fixed parts of the code predictability sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub encoder_steps: usize,
    pub prior_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { encoder_steps: 1000, prior_steps: 1000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathologyConfig {
    /// Images reconstructed per model.
    pub images: usize,
}

impl Default for PathologyConfig {
    fn default() -> Self {
        PathologyConfig { images: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub global: GlobalConfig,
    /// `[level.1]`, `[level.2]`, … numbered from 1 without gaps.
    pub level: BTreeMap<String, LevelSpec>,
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    pub sweep: SweepConfig,
    pub pathology: PathologyConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// The fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.global.train().validate()?;
        self.sampler.validate()?;
        self.levels()?;
        Ok(())
    }

    /// Level specs in order.
    pub fn levels(&self) -> Result<Vec<LevelSpec>> {
        let mut numbered = Vec::with_capacity(self.level.len());
        for (k, spec) in &self.level {
            let n: usize = k.parse().map_err(|_| Error::Config(format!("level section [level.{k}] must be numbered")))?;
            spec.validate()?;
            numbered.push((n, *spec));
        }
        numbered.sort_by_key(|(n, _)| *n);
        for (i, (n, _)) in numbered.iter().enumerate() {
            if *n != i + 1 {
                return Err(Error::Config(format!("level sections must be numbered 1..={} without gaps, found {n}", numbered.len())));
            }
        }
        Ok(numbered.into_iter().map(|(_, s)| s).collect())
    }

    /// Keeps the first `n` levels.
    pub fn truncate_levels(&mut self, n: usize) {
        self.level.retain(|k, _| k.parse::<usize>().map(|i| i <= n).unwrap_or(false));
    }
}
