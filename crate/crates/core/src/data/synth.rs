use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::IntTensor;

/// Layout sign (−1 dark, +1 bright) of class `c` at `(i, j)`; `shift` moves
/// the boundary by a pixel or two per image.
fn layout(c: usize, i: usize, j: usize, h: usize, w: usize, shift: i64) -> i64 {
    let (i, j, h, w) = (i as i64, j as i64, h as i64, w as i64);
    let bright = match c % 4 {
        0 => j >= w / 2 + shift,
        1 => ((i + shift).rem_euclid(h) / (h / 4).max(1)) % 2 == 1,
        2 => {
            let (ci, cj) = (h / 2 + shift, w / 2);
            let r = (h.min(w) / 3).max(1);
            (i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r
        }
        _ => i + j >= h + shift,
    };
    if bright {
        1
    } else {
        -1
    }
}

/// Signed noise in `[-amp, amp]` from integer draws only.
fn noise(r: &mut Rng, amp: i64) -> i64 {
    rng::below(r, (2 * amp + 1) as u64) as i64 - amp
}

/// Synthetic corpus whose classes differ in global layout and brightness
/// and carry class-specific local texture.
///
/// Class `c` has base level `M·(c+1)/(C+1)` (with `M = 2^bits − 1`), a
/// bright/dark layout (half split, stripes, disc, diagonal, cycling) of
/// amplitude `M/5`, a per-image brightness offset and pixel texture that
/// is i.i.d. for even classes and column-correlated for odd ones. Only
/// integer draws are used, so the output is identical on every platform.
pub fn synth_textures(n: usize, h: usize, w: usize, classes: u16, bits: u8, seed: u64) -> Result<Dataset> {
    if classes == 0 || !(1..=16).contains(&bits) || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("synth_textures: classes={classes} bits={bits} size={h}x{w}")));
    }
    let m = ((1u32 << bits) - 1) as i64;
    let amp = (m / 5).max(1);
    let jitter = (m / 16).max(1);
    let tex = (m / 16).max(1);
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng::below(&mut r, classes as u64) as usize;
        labels.push(c as u16);
        let base = m * (c as i64 + 1) / (classes as i64 + 1);
        let offset = noise(&mut r, jitter);
        let shift = noise(&mut r, 1);
        let columns: Vec<i64> = (0..w.div_ceil(2)).map(|_| noise(&mut r, tex)).collect();
        for i in 0..h {
            for j in 0..w {
                let t = if c % 2 == 0 { noise(&mut r, tex) } else { columns[j / 2] };
                let v = base + amp * layout(c, i, j, h, w, shift) + offset + t;
                data.push(v.clamp(0, m) as u16);
            }
        }
    }
    Dataset::new(IntTensor::new([n, 1, h, w], data)?, labels, bits, classes)
}
