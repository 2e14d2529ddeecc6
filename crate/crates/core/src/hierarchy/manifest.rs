//! On-disk hierarchy: a TOML manifest naming one PXS1 checkpoint per level
//! plus one for the prior.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_prior, Geometry, HierarchicalModel, LevelSpec, PriorSpec, TrainedLevel};
use crate::error::{Error, Result};
use crate::pixelcnn::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, PixelCnnConfig};
use crate::rng;

pub const MANIFEST_FORMAT: &str = "pixelstack-hierarchy";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLevel {
    pub index: usize,
    pub checkpoint: String,
    pub input: Geometry,
    pub output: Geometry,
    pub spec: LevelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPrior {
    pub checkpoint: String,
    pub input: Geometry,
    pub spec: PriorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub pixel_bits: u8,
    pub classes: u16,
    pub pixels: Geometry,
    #[serde(default)]
    pub levels: Vec<ManifestLevel>,
    pub prior: ManifestPrior,
}

fn header(c: &PixelCnnConfig) -> CheckpointHeader {
    CheckpointHeader { layers: c.layers as u32, hidden: c.hidden as u32, bins: c.bins as u32, groups: c.groups as u32 }
}

fn check_header(found: &CheckpointHeader, c: &PixelCnnConfig, path: &Path) -> Result<()> {
    if *found != header(c) {
        return Err(Error::Checkpoint(format!("{}: header {found:?} does not match the manifest ({:?})", path.display(), header(c))));
    }
    Ok(())
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("manifest format {:?} is not {MANIFEST_FORMAT:?}", m.format)));
        }
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version(m.version));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

impl HierarchicalModel {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            pixel_bits: self.pixel_bits,
            classes: self.classes,
            pixels: self.pixels,
            levels: self
                .levels
                .iter()
                .map(|l| ManifestLevel { index: l.index, checkpoint: format!("level{}.pxs", l.index), input: l.input, output: l.output(), spec: l.spec })
                .collect(),
            prior: ManifestPrior { checkpoint: "prior.pxs".into(), input: self.top, spec: self.prior_spec },
        }
    }

    /// Writes checkpoints and `manifest.toml` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = self.manifest();
        for (level, entry) in self.levels.iter().zip(&m.levels) {
            write_checkpoint(&dir.join(&entry.checkpoint), &Checkpoint::capture(header(&level.decoder.local.config), level))?;
        }
        write_checkpoint(&dir.join(&m.prior.checkpoint), &Checkpoint::capture(header(&self.prior.config), &self.prior))?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, m.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Rebuilds the architecture from the manifest and loads every checkpoint.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m = Manifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut r = rng::seeded(0);
        let mut levels = Vec::with_capacity(m.levels.len());
        let mut expected = m.pixels;
        for (i, entry) in m.levels.iter().enumerate() {
            if entry.index != i + 1 || entry.input != expected || entry.spec.output_geometry(entry.input) != entry.output {
                return Err(Error::Geometry(format!("manifest level {} does not chain from the level below", entry.index)));
            }
            let (mut level, _) = TrainedLevel::build(entry.index, &entry.spec, entry.input, false, &mut r)?;
            let path = dir.join(&entry.checkpoint);
            let ck = read_checkpoint(&path)?;
            check_header(&ck.header, &level.decoder.local.config, &path)?;
            ck.restore(&mut level)?;
            level.codebook.initialized = true;
            expected = entry.output;
            levels.push(level);
        }
        if m.prior.input != expected {
            return Err(Error::Geometry("manifest prior input does not match the top level's codes".into()));
        }
        let mut prior = build_prior(&m.prior.spec, m.prior.input, m.classes, &mut r)?;
        let path = dir.join(&m.prior.checkpoint);
        let ck = read_checkpoint(&path)?;
        check_header(&ck.header, &prior.config, &path)?;
        ck.restore(&mut prior)?;
        Ok(HierarchicalModel { levels, prior, prior_spec: m.prior.spec, top: m.prior.input, pixels: m.pixels, pixel_bits: m.pixel_bits, classes: m.classes })
    }
}
