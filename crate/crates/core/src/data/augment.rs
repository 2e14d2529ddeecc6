use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{IntTensor, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop_to: Option<usize>,
}

/// Random horizontal flip (probability 0.5) and square crop at a uniform
/// offset, applied to every item of `image` with independent draws.
pub fn augment(image: &IntTensor, r: &mut Rng, flags: AugmentFlags) -> Result<IntTensor> {
    let [n, g, h, w] = image.shape();
    let side = flags.crop_to;
    if let Some(s) = side {
        if s == 0 || s > h.min(w) {
            return Err(Error::InvalidArgument(format!("crop {s} does not fit a {h}x{w} image")));
        }
    }
    let (oh, ow) = side.map_or((h, w), |s| (s, s));
    let mut out = IntTensor::zeros([n, g, oh, ow]);
    for b in 0..n {
        let flip = flags.flip && rng::below(r, 2) == 1;
        let (dy, dx) = match side {
            Some(s) => (rng::below(r, (h - s + 1) as u64) as usize, rng::below(r, (w - s + 1) as u64) as usize),
            None => (0, 0),
        };
        for c in 0..g {
            for i in 0..oh {
                for j in 0..ow {
                    let sj = if flip { w - 1 - (dx + j) } else { dx + j };
                    out.set(b, c, i, j, image.get(b, c, dy + i, sj));
                }
            }
        }
    }
    Ok(out)
}

/// `v → floor(v / 2^(from − to))`.
pub fn bit_depth_reduce(image: &IntTensor, from_bits: u8, to_bits: u8) -> Result<IntTensor> {
    if to_bits == 0 || to_bits > from_bits || from_bits > 16 {
        return Err(Error::InvalidArgument(format!("cannot reduce {from_bits} bits to {to_bits}")));
    }
    let shift = from_bits - to_bits;
    let data = image.data().iter().map(|&v| v >> shift).collect();
    IntTensor::new(image.shape(), data)
}

/// Mean over `f × f` blocks of unit-scaled values, `[N, G, ⌈H/f⌉, ⌈W/f⌉]`.
pub fn downsample_mean(image: &IntTensor, bins: usize, f: usize) -> Tensor {
    let [n, g, h, w] = image.shape();
    let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
    let unit = image.to_unit_float(bins);
    let mut out = vec![0.0; n * g * oh * ow];
    let mut count = vec![0usize; oh * ow];
    for i in 0..h {
        for j in 0..w {
            count[(i / f) * ow + j / f] += 1;
        }
    }
    for b in 0..n {
        for c in 0..g {
            for i in 0..h {
                for j in 0..w {
                    out[((b * g + c) * oh + i / f) * ow + j / f] += unit.data()[((b * g + c) * h + i) * w + j];
                }
            }
            for p in 0..oh * ow {
                out[(b * g + c) * oh * ow + p] /= count[p] as f64;
            }
        }
    }
    Tensor::new(vec![n, g, oh, ow], out).expect("non-empty image")
}
