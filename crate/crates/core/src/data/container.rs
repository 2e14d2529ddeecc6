//! `IDT1` dataset container.
//!
//! Little-endian throughout: magic `IDT1`, `u32` version, `u32` N, H, W, G,
//! `u8` bits, `u16` class count, N × `u16` labels, then the `[N, G, H, W]`
//! payload in row-major order as `u8` when bits ≤ 8, otherwise `u16`.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::IntTensor;

pub const MAGIC: [u8; 4] = *b"IDT1";
pub const VERSION: u32 = 1;

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let [n, g, h, w] = ds.images.shape();
    let mut out = Vec::with_capacity(27 + 2 * n + ds.images.data().len() * 2);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [n, h, w, g] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(ds.bits);
    out.extend_from_slice(&ds.classes.to_le_bytes());
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if ds.bits <= 8 {
        out.extend(ds.images.data().iter().map(|&v| v as u8));
    } else {
        for v in ds.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut at = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4, "version")?);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32_at(take(4, "header")?) as usize;
    }
    let [n, h, w, g] = dims;
    let bits = take(1, "header")?[0];
    let classes = u16::from_le_bytes(take(2, "header")?.try_into().unwrap());
    let labels: Vec<u16> = take(2 * n, "labels")?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let count = n.checked_mul(g).and_then(|x| x.checked_mul(h)).and_then(|x| x.checked_mul(w)).ok_or_else(|| Error::Truncated("payload".into()))?;
    let data: Vec<u16> = if bits <= 8 {
        take(count, "payload")?.iter().map(|&b| b as u16).collect()
    } else {
        take(count.checked_mul(2).ok_or_else(|| Error::Truncated("payload".into()))?, "payload")?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect()
    };
    if at != bytes.len() {
        return Err(Error::InvalidArgument(format!("{} trailing bytes after payload", bytes.len() - at)));
    }
    Dataset::new(IntTensor::new([n, g, h, w], data)?, labels, bits, classes)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::write(path, encode(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
