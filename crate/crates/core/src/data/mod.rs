//! Datasets, the synthetic texture corpus, augmentation and file formats.

mod augment;
mod container;
mod image;
mod metrics;
mod synth;

pub use augment::{augment, bit_depth_reduce, downsample_mean, AugmentFlags};
pub use container::{load_dataset, save_dataset, MAGIC as IDT_MAGIC, VERSION as IDT_VERSION};
pub use image::{read_pnm, write_pgm_grid, PnmImage};
pub use metrics::{read_csv, write_csv, MetricRow, MetricsWriter};
pub use synth::synth_textures;

use crate::error::{Error, Result};
use crate::rng::splitmix64;
use crate::tensor::IntTensor;

/// Which part of a corpus a dataset holds. Kept in memory only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    All,
    Train,
    Validation,
}

/// Integer images (or code maps) `[N, G, H, W]` with labels and bit depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: IntTensor,
    pub labels: Vec<u16>,
    pub bits: u8,
    pub classes: u16,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: IntTensor, labels: Vec<u16>, bits: u8, classes: u16) -> Result<Self> {
        let ds = Dataset { images, labels, bits, classes, split: Split::All };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bins(&self) -> usize {
        1usize << self.bits
    }

    pub fn groups(&self) -> usize {
        self.images.channels()
    }

    pub fn height(&self) -> usize {
        self.images.height()
    }

    pub fn width(&self) -> usize {
        self.images.width()
    }

    /// Checks value range, label range and label count.
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 16 {
            return Err(Error::InvalidArgument(format!("bits per channel must be in 1..=16, got {}", self.bits)));
        }
        if self.classes == 0 {
            return Err(Error::InvalidArgument("class count must be at least 1".into()));
        }
        if self.labels.len() != self.len() {
            return Err(Error::shape("dataset", format!("{} labels for {} images", self.labels.len(), self.len())));
        }
        let limit = self.bins();
        if let Some(i) = self.images.data().iter().position(|&v| v as usize >= limit) {
            return Err(Error::InvariantViolation { index: i, detail: format!("value {} >= 2^{}", self.images.data()[i], self.bits) });
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.classes) {
            return Err(Error::InvariantViolation { index: i, detail: format!("label {} >= class count {}", self.labels[i], self.classes) });
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            bits: self.bits,
            classes: self.classes,
            split: self.split,
        }
    }

    /// Deterministic 90/10 split: item `i` is validation iff
    /// `splitmix64(i) % 10 == 0`.
    pub fn split_hashed(&self) -> (Dataset, Dataset) {
        let (val, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| splitmix64(i as u64) % 10 == 0);
        let mut t = self.select(&train);
        t.split = Split::Train;
        let mut v = self.select(&val);
        v.split = Split::Validation;
        (t, v)
    }
}
