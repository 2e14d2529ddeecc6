//! Dense float64 tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value (shape + row-major data). Differentiable
//! computation happens on a [`Tape`], which records every op together with
//! what its backward rule needs. Trainable state lives in [`Parameter`]s that
//! are bound onto a tape per forward pass.

mod conv;
mod gradcheck;
mod optim;
mod tape;

pub use conv::ConvGeom;
pub(crate) use conv::conv_at;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Adam, Module, Parameter};
pub use tape::{nll_per_position, softmax_values, Grads, Tape, UnaryKind, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Convenience accessor for rank-4 tensors laid out `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::shape("dims4", format!("expected rank 4, got {other:?}"))),
        }
    }
}

/// Integer-valued `[N, C, H, W]` array: images, code maps, sampled outputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IntTensor {
    shape: [usize; 4],
    data: Vec<u16>,
}

impl IntTensor {
    pub fn new(shape: [usize; 4], data: Vec<u16>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "int_tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        IntTensor { shape, data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> u16 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + i) * w + j]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: u16) {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + i) * w + j] = v;
    }

    /// Items `indices` stacked into a new batch.
    pub fn select(&self, indices: &[usize]) -> IntTensor {
        let len = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        IntTensor { shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]], data }
    }

    pub fn item(&self, index: usize) -> IntTensor {
        self.select(&[index])
    }

    pub fn max_value(&self) -> Option<u16> {
        self.data.iter().copied().max()
    }

    /// One-hot encoding `[N, C·bins, H, W]`, channel `c·bins + v` set for value `v`.
    ///
    /// Positions where `keep` is zero (a per-item `[N, H, W]` mask) encode as
    /// the all-zero vector, which is distinct from any valid value.
    pub fn one_hot(&self, bins: usize, keep: Option<&[f64]>) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        if let Some(k) = keep {
            if k.len() != n * hw {
                return Err(Error::shape("one_hot", format!("mask len {} != {}", k.len(), n * hw)));
            }
        }
        let mut out = vec![0.0; n * c * bins * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    if let Some(k) = keep {
                        if k[b * hw + p] == 0.0 {
                            continue;
                        }
                    }
                    let v = self.data[(b * c + ch) * hw + p] as usize;
                    if v >= bins {
                        return Err(Error::IndexOutOfRange { op: "one_hot", index: v, limit: bins });
                    }
                    out[((b * c + ch) * bins + v) * hw + p] = 1.0;
                }
            }
        }
        Tensor::new(vec![n, c * bins, h, w], out)
    }

    /// Values as floats, scaled by `1 / (bins - 1)` into `[0, 1]`.
    pub fn to_unit_float(&self, bins: usize) -> Tensor {
        let scale = 1.0 / (bins.max(2) - 1) as f64;
        let shape = self.shape.to_vec();
        Tensor { shape, data: self.data.iter().map(|&v| v as f64 * scale).collect() }
    }

    pub fn to_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}
