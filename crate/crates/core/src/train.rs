//! Shared pieces of every training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Adam, Module};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Polyak decay for evaluation weights; 0 disables averaging.
    pub polyak: f64,
    /// Metric rows are recorded every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000, batch: 16, lr: 1e-3, polyak: 0.9999, log_every: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.polyak) {
            return Err(Error::Config(format!("polyak decay must be in [0, 1), got {}", self.polyak)));
        }
        Ok(())
    }

    pub fn should_log(&self, step: usize) -> bool {
        step + 1 == self.steps || (self.log_every > 0 && step % self.log_every == 0)
    }

    pub fn optimizer(&self, model: &mut dyn Module) -> Result<Adam> {
        self.validate()?;
        if self.polyak > 0.0 {
            model.enable_polyak(self.polyak)?;
        }
        Adam::new(self.lr)
    }
}

/// Draws a minibatch of item indices with replacement across epochs:
/// a fresh shuffle per pass, consumed in order.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    at: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        BatchSampler { order: (0..n).collect(), at: n }
    }

    pub fn next(&mut self, batch: usize, r: &mut Rng) -> Vec<usize> {
        let n = self.order.len();
        assert!(n > 0, "empty dataset");
        (0..batch)
            .map(|_| {
                if self.at == n {
                    rng::shuffle(r, &mut self.order);
                    self.at = 0;
                }
                self.at += 1;
                self.order[self.at - 1]
            })
            .collect()
    }
}

/// Fails with a diagnostic when a loss value is not finite.
pub fn check_loss(phase: &str, step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { phase: phase.to_string(), step, detail: format!("loss became {value}") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_item_per_pass() {
        let mut s = BatchSampler::new(10);
        let mut r = rng::seeded(1);
        let mut seen: Vec<usize> = s.next(5, &mut r);
        seen.extend(s.next(5, &mut r));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn divergence_is_reported() {
        assert!(check_loss("x", 3, 1.0).is_ok());
        assert!(matches!(check_loss("x", 3, f64::NAN), Err(Error::Divergence { step: 3, .. })));
    }

    #[test]
    fn bad_config() {
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { polyak: 1.0, ..Default::default() }.validate().is_err());
    }
}
