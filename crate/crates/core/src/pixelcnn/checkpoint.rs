//! `PXS1` parameter container.
//!
//! Layout, all little-endian: magic `PXS1`, `u32` version, four `u32`
//! config words (layers, hidden, bins, groups), then records until end of
//! file. A record is `u32` name length, UTF-8 name, `u32` rank, `rank × u32`
//! dims and `f64` payload in row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Module, Tensor};

pub const MAGIC: [u8; 4] = *b"PXS1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub layers: u32,
    pub hidden: u32,
    pub bins: u32,
    pub groups: u32,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures a module; Polyak averages are stored in place of live values.
    pub fn capture(header: CheckpointHeader, module: &dyn Module) -> Self {
        let mut params = Vec::new();
        module.visit(&mut |p| {
            let value = match &p.polyak_shadow {
                Some(s) => Tensor::new(p.value.shape().to_vec(), s.clone()).expect("shadow matches value"),
                None => p.value.clone(),
            };
            params.push((p.name.clone(), value));
        });
        Checkpoint { header, params }
    }

    /// Loads every parameter of `module` by name. Missing names and extra
    /// records are both errors.
    pub fn restore(&self, module: &mut dyn Module) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut used = 0usize;
        let mut failure = None;
        module.visit_mut(&mut |p| {
            if failure.is_some() {
                return;
            }
            match by_name.get(p.name.as_str()) {
                Some(t) => match p.load(t) {
                    Ok(()) => used += 1,
                    Err(e) => failure = Some(e),
                },
                None => failure = Some(Error::Checkpoint(format!("missing parameter {}", p.name))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != self.params.len() {
            return Err(Error::Checkpoint(format!("{} stored records but the model has {used}", self.params.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let h = self.header;
        for v in [h.layers, h.hidden, h.bins, h.groups] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let header = CheckpointHeader { layers: r.u32("config")?, hidden: r.u32("config")?, bins: r.u32("config")?, groups: r.u32("config")? };
        let mut params = Vec::new();
        while r.at < bytes.len() {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Truncated(name.clone()))?, "payload")?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
