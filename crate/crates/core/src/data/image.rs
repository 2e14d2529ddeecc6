//! Binary PGM (P5) and PPM (P6) output.
//!
//! Values are rescaled from `[0, 2^bits)` to `[0, 255]` by
//! `round(v · 255 / (2^bits − 1))`, so bit depths up to 8 read back exactly.
//! Grids place images row-major, `cols` per row, with a 1-pixel separator of
//! value 0 between neighbours.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::IntTensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u8>,
}

impl PnmImage {
    /// Samples mapped back to `bits`-bit values, as `[1, channels, H, W]`.
    pub fn to_values(&self, bits: u8) -> IntTensor {
        let m = ((1u32 << bits) - 1) as f64;
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = IntTensor::zeros([1, c, h, w]);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let v = self.data[(i * w + j) * c + ch] as f64;
                    out.set(0, ch, i, j, (v * m / self.maxval as f64).round() as u16);
                }
            }
        }
        out
    }
}

fn to_byte(v: u16, bits: u8) -> u8 {
    let m = ((1u32 << bits) - 1) as u64;
    ((v as u64 * 255 + m / 2) / m).min(255) as u8
}

/// Encodes a grid of equally sized images as P5 (one channel) or P6 (three).
pub fn encode_grid(images: &IntTensor, bits: u8, cols: usize) -> Result<Vec<u8>> {
    let [n, g, h, w] = images.shape();
    if g != 1 && g != 3 {
        return Err(Error::InvalidArgument(format!("PNM output needs 1 or 3 channels, got {g}")));
    }
    if n == 0 || cols == 0 || !(1..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("grid of {n} images in {cols} columns at {bits} bits")));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * w + cols - 1, rows * h + rows - 1);
    let mut pixels = vec![0u8; gw * gh * g];
    for b in 0..n {
        let (oy, ox) = ((b / cols) * (h + 1), (b % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                for c in 0..g {
                    pixels[((oy + i) * gw + ox + j) * g + c] = to_byte(images.get(b, c, i, j), bits);
                }
            }
        }
    }
    let magic = if g == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_pgm_grid(images: &IntTensor, bits: u8, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_grid(images, bits, cols)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary P5/P6 file with maxval ≤ 255.
pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let bad = |m: &str| Error::InvalidArgument(format!("PNM: {m}"));
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Truncated("PNM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    at += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("maxval {maxval} not in 1..=255")));
    }
    let len = width * height * channels;
    let data = bytes.get(at..at + len).ok_or_else(|| Error::Truncated("PNM pixels".into()))?.to_vec();
    Ok(PnmImage { width, height, channels, maxval: maxval as u16, data })
}
