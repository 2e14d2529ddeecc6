use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::optim::Parameter;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
}

impl UnaryKind {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative expressed through the op's output `y`.
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sigmoid => y * (1.0 - y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }
}

/// `[outer, classes, inner]` view of a tensor around its class axis.
#[derive(Clone, Copy, Debug)]
struct ClassView {
    outer: usize,
    classes: usize,
    inner: usize,
}

impl ClassView {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::shape("class_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(ClassView {
            outer: shape[..axis].iter().product(),
            classes: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn positions(&self) -> usize {
        self.outer * self.inner
    }

    fn at(&self, pos: usize, k: usize) -> usize {
        let (o, i) = (pos / self.inner, pos % self.inner);
        (o * self.classes + k) * self.inner + i
    }
}

enum Op {
    Leaf,
    Param {
        key: u64,
    },
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        mask: Option<Arc<Tensor>>,
        geom: ConvGeom,
        weff: Option<Vec<f64>>,
        cols: Vec<f64>,
    },
    DepthToSpace {
        input: Var,
        r: usize,
    },
    SpaceToDepth {
        input: Var,
        r: usize,
    },
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Map {
        input: Var,
        deriv: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        c: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        view: ClassView,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        norm: f64,
    },
    KlDiv {
        logits: Var,
        view: ClassView,
        probs: Vec<f64>,
        teacher: Vec<f64>,
        weights: Option<Vec<f64>>,
        norm: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
    StraightThrough {
        z: Var,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
        code_channels: usize,
        plane: usize,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Records operations for a single forward pass and replays them backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    by_var: Vec<Option<Tensor>>,
    by_param: HashMap<u64, Tensor>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    /// Total gradient for a parameter, summed over every binding on the tape.
    pub fn param(&self, key: u64) -> Option<&Tensor> {
        self.by_param.get(&key)
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `shape`, with 0 on dimensions broadcast against `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == out[d] { acc } else { 0 };
        acc *= shape[d];
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` in row-major output order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = rank - 1;
        loop {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
            if d == 0 {
                break;
            }
            d -= 1;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Numerically stable softmax along `axis`, returned as plain values.
pub fn softmax_values(t: &Tensor, axis: usize) -> Result<Tensor> {
    let view = ClassView::new(t.shape(), axis)?;
    let mut out = vec![0.0; t.numel()];
    softmax_into(t.data(), view, &mut out);
    Ok(Tensor { shape: t.shape().to_vec(), data: out })
}

fn softmax_into(logits: &[f64], view: ClassView, out: &mut [f64]) {
    for pos in 0..view.positions() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..view.classes {
            max = max.max(logits[view.at(pos, k)]);
        }
        let mut total = 0.0;
        for k in 0..view.classes {
            let e = (logits[view.at(pos, k)] - max).exp();
            out[view.at(pos, k)] = e;
            total += e;
        }
        for k in 0..view.classes {
            out[view.at(pos, k)] /= total;
        }
    }
}

/// `log Σ exp` for one position of a class view.
fn log_sum_exp(logits: &[f64], view: ClassView, pos: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for k in 0..view.classes {
        max = max.max(logits[view.at(pos, k)]);
    }
    let total: f64 = (0..view.classes).map(|k| (logits[view.at(pos, k)] - max).exp()).sum();
    max + total.ln()
}

/// Per-position negative log-probability of `targets` (nats), class axis `axis`.
pub fn nll_per_position(logits: &Tensor, axis: usize, targets: &[usize]) -> Result<Vec<f64>> {
    let view = ClassView::new(logits.shape(), axis)?;
    if targets.len() != view.positions() {
        return Err(Error::shape("nll", format!("{} targets for {} positions", targets.len(), view.positions())));
    }
    targets
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            if t >= view.classes {
                return Err(Error::IndexOutOfRange { op: "nll", index: t, limit: view.classes });
            }
            Ok(log_sum_exp(logits.data(), view, pos) - logits.data()[view.at(pos, t)])
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.push(p.value.clone(), p.trainable, Op::Param { key: p.key() })
    }

    /// Copy of `v`'s value cut off from the graph (`[v]` in loss notation).
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `conv2d(input, W ⊙ mask, bias)` with implicit zero same-padding.
    ///
    /// Masked-out weight entries contribute nothing forward and receive a
    /// gradient of exactly zero.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, mask: Option<Arc<Tensor>>, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride)?;
        if self.shape(bias) != [geom.c_out] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(bias), geom.c_out)));
        }
        if let Some(m) = &mask {
            if m.shape() != self.shape(weight) {
                return Err(Error::shape("conv2d", format!("mask {:?} vs weight {:?}", m.shape(), self.shape(weight))));
            }
        }
        let weff = mask.as_ref().map(|m| {
            self.value(weight).data().iter().zip(m.data()).map(|(w, m)| w * m).collect::<Vec<_>>()
        });
        let w = weff.as_deref().unwrap_or(self.value(weight).data());
        let (out, cols) = conv_forward(&geom, self.value(input).data(), w, self.value(bias).data());
        check_finite("conv2d", &out)?;
        let needs = self.ng(input) || self.ng(weight) || self.ng(bias);
        let value = Tensor { shape: geom.out_shape(), data: out };
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.push(value, needs, Op::Conv { input, weight, bias, mask, geom, weff, cols }))
    }

    /// Depth-to-space: `[N, C·r², H, W] -> [N, C, rH, rW]`.
    pub fn depth_to_space(&mut self, input: Var, r: usize) -> Result<Var> {
        let [n, cr2, h, w] = self.value(input).dims4()?;
        if r == 0 || cr2 % (r * r) != 0 {
            return Err(Error::shape("subpixel_upsample", format!("{cr2} channels not divisible by r²={}", r * r)));
        }
        let c = cr2 / (r * r);
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let ic = ch * r * r + i * r + j;
                        for y in 0..h {
                            for x in 0..w {
                                let s = ((b * cr2 + ic) * h + y) * w + x;
                                let d = ((b * c + ch) * h * r + y * r + i) * w * r + x * r + j;
                                out[d] = src[s];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.ng(input);
        Ok(self.push(Tensor { shape: vec![n, c, h * r, w * r], data: out }, needs, Op::DepthToSpace { input, r }))
    }

    /// Space-to-depth, the exact inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, input: Var, r: usize) -> Result<Var> {
        let [n, c, hr, wr] = self.value(input).dims4()?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::shape("space_to_depth", format!("{hr}x{wr} not divisible by {r}")));
        }
        let (h, w) = (hr / r, wr / r);
        let src = self.value(input).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oc = ch * r * r + i * r + j;
                        for y in 0..h {
                            for x in 0..w {
                                let s = ((b * c + ch) * hr + y * r + i) * wr + x * r + j;
                                let d = ((b * c * r * r + oc) * h + y) * w + x;
                                out[d] = src[s];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.ng(input);
        Ok(self.push(Tensor { shape: vec![n, c * r * r, h, w], data: out }, needs, Op::SpaceToDepth { input, r }))
    }

    pub fn unary(&mut self, input: Var, kind: UnaryKind) -> Result<Var> {
        let src = self.value(input);
        let data: Vec<f64> = src.data().iter().map(|&x| kind.apply(x)).collect();
        check_finite(kind.name(), &data)?;
        let value = Tensor { shape: src.shape().to_vec(), data };
        let needs = self.ng(input);
        Ok(self.push(value, needs, Op::Unary { input, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, input: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(input);
        let data: Vec<f64> = src.data().iter().map(|&x| f(x)).collect();
        check_finite("map", &data)?;
        let deriv = src.data().iter().map(|&x| df(x)).collect();
        let value = Tensor { shape: src.shape().to_vec(), data };
        let needs = self.ng(input);
        Ok(self.push(value, needs, Op::Map { input, deriv }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, data) = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            (va.shape().to_vec(), data)
        } else {
            let out = broadcast_shape(op, va.shape(), vb.shape())?;
            let (sa, sb) = (broadcast_strides(va.shape(), &out), broadcast_strides(vb.shape(), &out));
            let mut data = vec![0.0; out.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            (out, data)
        };
        check_finite(op, &data)?;
        Ok((Tensor { shape, data }, self.ng(a) || self.ng(b)))
    }

    /// Broadcasting add; operands have equal rank and each dim equal or 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Result<Var> {
        let src = self.value(input);
        let data: Vec<f64> = src.data().iter().map(|&x| x * c).collect();
        check_finite("scale", &data)?;
        let value = Tensor { shape: src.shape().to_vec(), data };
        let needs = self.ng(input);
        Ok(self.push(value, needs, Op::Scale { input, c }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().sum();
        check_finite("sum", &[total])?;
        let needs = self.ng(input);
        Ok(self.push(Tensor::scalar(total), needs, Op::Sum { input }))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let mean = src.data().iter().sum::<f64>() / src.numel() as f64;
        check_finite("mean", &[mean])?;
        let needs = self.ng(input);
        Ok(self.push(Tensor::scalar(mean), needs, Op::Mean { input }))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = Tensor::new(shape, self.value(input).data().to_vec())?;
        let needs = self.ng(input);
        Ok(self.push(value, needs, Op::Reshape { input }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.ng(input);
        Ok(self.push(Tensor { shape: out_shape, data }, needs, Op::Narrow { input, axis, start }))
    }

    /// Mean softmax cross-entropy (nats) of integer `targets` along `axis`.
    ///
    /// `weights`, when given, holds one non-negative weight per position and
    /// the mean is taken over the total weight.
    pub fn cross_entropy(&mut self, logits: Var, axis: usize, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let view = ClassView::new(self.shape(logits), axis)?;
        let positions = view.positions();
        if targets.len() != positions {
            return Err(Error::shape("softmax_cross_entropy", format!("{} targets for {positions} positions", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= view.classes) {
            return Err(Error::IndexOutOfRange { op: "softmax_cross_entropy", index: bad, limit: view.classes });
        }
        let norm = check_weights("softmax_cross_entropy", weights, positions)?;
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (pos, &t) in targets.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[pos]);
            if w != 0.0 {
                total += w * (log_sum_exp(data, view, pos) - data[view.at(pos, t)]);
            }
        }
        let value = total / norm;
        check_finite("softmax_cross_entropy", &[value])?;
        let needs = self.ng(logits);
        let probs = if needs {
            let mut p = vec![0.0; data.len()];
            softmax_into(data, view, &mut p);
            p
        } else {
            Vec::new()
        };
        let op = Op::CrossEntropy {
            logits,
            view,
            probs,
            targets: targets.to_vec(),
            weights: weights.map(<[f64]>::to_vec),
            norm,
        };
        Ok(self.push(Tensor::scalar(value), needs, op))
    }

    /// Mean `KL(teacher ‖ softmax(logits))` along `axis`; `teacher` is constant.
    pub fn kl_divergence(&mut self, teacher: &Tensor, logits: Var, axis: usize, weights: Option<&[f64]>) -> Result<Var> {
        if teacher.shape() != self.shape(logits) {
            return Err(Error::shape("distill_loss", format!("teacher {:?} vs student {:?}", teacher.shape(), self.shape(logits))));
        }
        let view = ClassView::new(self.shape(logits), axis)?;
        let positions = view.positions();
        let norm = check_weights("distill_loss", weights, positions)?;
        let data = self.value(logits).data();
        let t = teacher.data();
        let mut total = 0.0;
        for pos in 0..positions {
            let w = weights.map_or(1.0, |w| w[pos]);
            if w == 0.0 {
                continue;
            }
            let lse = log_sum_exp(data, view, pos);
            let mut kl = 0.0;
            for k in 0..view.classes {
                let i = view.at(pos, k);
                if t[i] > 0.0 {
                    kl += t[i] * (t[i].max(1e-12).ln() - (data[i] - lse));
                }
            }
            total += w * kl;
        }
        let value = total / norm;
        check_finite("distill_loss", &[value])?;
        let needs = self.ng(logits);
        let mut probs = vec![0.0; data.len()];
        softmax_into(data, view, &mut probs);
        let op = Op::KlDiv {
            logits,
            view,
            probs,
            teacher: t.to_vec(),
            weights: weights.map(<[f64]>::to_vec),
            norm,
        };
        Ok(self.push(Tensor::scalar(value), needs, op))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.numel() as f64;
        check_finite("mse", &[value])?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(value), needs, Op::Mse { a, b }))
    }

    /// Forward value `quantized`, backward identity into `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Result<Var> {
        if quantized.shape() != self.shape(z) {
            return Err(Error::shape("straight_through", format!("{:?} vs {:?}", quantized.shape(), self.shape(z))));
        }
        let needs = self.ng(z);
        Ok(self.push(quantized, needs, Op::StraightThrough { z }))
    }

    /// Codebook lookup: `table [k, d]`, indices `[N, C, H, W]` → `[N, C·d, H, W]`.
    pub fn gather_codes(&mut self, table: Var, indices: &[usize], shape: [usize; 4]) -> Result<Var> {
        let [k, d] = match self.shape(table) {
            &[k, d] => [k, d],
            other => return Err(Error::shape("gather_codes", format!("table must be rank 2, got {other:?}"))),
        };
        let [n, c, h, w] = shape;
        if indices.len() != n * c * h * w {
            return Err(Error::shape("gather_codes", format!("{} indices for {shape:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange { op: "gather_codes", index: bad, limit: k });
        }
        let plane = h * w;
        let tab = self.value(table).data();
        let mut out = vec![0.0; n * c * d * plane];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    let code = indices[(b * c + ch) * plane + p];
                    for j in 0..d {
                        out[((b * c + ch) * d + j) * plane + p] = tab[code * d + j];
                    }
                }
            }
        }
        let needs = self.ng(table);
        let op = Op::Gather { table, indices: indices.to_vec(), code_channels: c, plane };
        Ok(self.push(Tensor { shape: vec![n, c * d, h, w], data: out }, needs, op))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// The tape is left untouched, so calling this twice yields the same
    /// gradients again; accumulation into parameters is the caller's step.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.ng(loss) {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut by_var: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut by_param: HashMap<u64, Tensor> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads)?;
            if let Op::Param { key } = node.op {
                match by_param.get_mut(&key) {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        by_param.insert(key, Tensor { shape: node.value.shape.clone(), data: g.clone() });
                    }
                }
            }
            by_var[i] = Some(Tensor { shape: node.value.shape.clone(), data: g });
        }
        Ok(Grads { by_var, by_param })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv { input, weight, bias, mask, geom, weff, cols } => {
                let need = (self.ng(*input), self.ng(*weight), self.ng(*bias));
                let w = weff.as_deref().unwrap_or(self.value(*weight).data());
                let cg = conv_backward(geom, self.value(*input).data(), cols, w, g, need);
                if let Some(gi) = cg.input {
                    add_into(slot(grads, *input, gi.len()), &gi);
                }
                if let Some(mut gw) = cg.weight {
                    if let Some(m) = mask {
                        gw.iter_mut().zip(m.data()).for_each(|(gw, m)| *gw *= m);
                    }
                    add_into(slot(grads, *weight, gw.len()), &gw);
                }
                if let Some(gb) = cg.bias {
                    add_into(slot(grads, *bias, gb.len()), &gb);
                }
            }
            Op::DepthToSpace { input, r } => {
                if self.ng(*input) {
                    let mut t = Tape::new();
                    let v = t.constant(Tensor { shape: node.value.shape.clone(), data: g.to_vec() });
                    let back = t.space_to_depth(v, *r)?;
                    add_into(slot(grads, *input, g.len()), t.value(back).data());
                }
            }
            Op::SpaceToDepth { input, r } => {
                if self.ng(*input) {
                    let mut t = Tape::new();
                    let v = t.constant(Tensor { shape: node.value.shape.clone(), data: g.to_vec() });
                    let back = t.depth_to_space(v, *r)?;
                    add_into(slot(grads, *input, g.len()), t.value(back).data());
                }
            }
            Op::Unary { input, kind } => {
                if self.ng(*input) {
                    let s = slot(grads, *input, g.len());
                    for ((s, &gi), &y) in s.iter_mut().zip(g).zip(node.value.data()) {
                        *s += gi * kind.deriv_from_output(y);
                    }
                }
            }
            Op::Map { input, deriv } => {
                if self.ng(*input) {
                    let s = slot(grads, *input, g.len());
                    for ((s, &gi), &d) in s.iter_mut().zip(g).zip(deriv) {
                        *s += gi * d;
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let out = node.value.shape();
                for (v, sgn) in [(*a, 1.0), (*b, sign)] {
                    if !self.ng(v) {
                        continue;
                    }
                    let vs = self.shape(v).to_vec();
                    let s = slot(grads, v, self.value(v).numel());
                    if vs == out {
                        s.iter_mut().zip(g).for_each(|(s, &gi)| *s += sgn * gi);
                    } else {
                        let sv = broadcast_strides(&vs, out);
                        let zero = vec![0; out.len()];
                        for_each_broadcast(out, &sv, &zero, |o, iv, _| s[iv] += sgn * g[o]);
                    }
                }
            }
            Op::Mul { a, b } => {
                let out = node.value.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.ng(v) {
                        continue;
                    }
                    let (vs, os) = (self.shape(v).to_vec(), self.shape(other).to_vec());
                    let od = self.value(other).data();
                    let s = slot(grads, v, self.value(v).numel());
                    if vs == out && os == out {
                        for ((s, &gi), &o) in s.iter_mut().zip(g).zip(od) {
                            *s += gi * o;
                        }
                    } else {
                        let (sv, so) = (broadcast_strides(&vs, out), broadcast_strides(&os, out));
                        for_each_broadcast(out, &sv, &so, |o, iv, io| s[iv] += g[o] * od[io]);
                    }
                }
            }
            Op::Scale { input, c } => {
                if self.ng(*input) {
                    let s = slot(grads, *input, g.len());
                    s.iter_mut().zip(g).for_each(|(s, &gi)| *s += c * gi);
                }
            }
            Op::Sum { input } => {
                if self.ng(*input) {
                    let n = self.value(*input).numel();
                    slot(grads, *input, n).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean { input } => {
                if self.ng(*input) {
                    let n = self.value(*input).numel();
                    let d = g[0] / n as f64;
                    slot(grads, *input, n).iter_mut().for_each(|s| *s += d);
                }
            }
            Op::Reshape { input } => {
                if self.ng(*input) {
                    add_into(slot(grads, *input, g.len()), g);
                }
            }
            Op::Narrow { input, axis, start } => {
                if self.ng(*input) {
                    let shape = self.shape(*input).to_vec();
                    let len = node.value.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let s = slot(grads, *input, self.value(*input).numel());
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        add_into(&mut s[base..base + len * inner], src);
                    }
                }
            }
            Op::CrossEntropy { logits, view, probs, targets, weights, norm } => {
                if self.ng(*logits) {
                    let s = slot(grads, *logits, probs.len());
                    for (pos, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(1.0, |w| w[pos]);
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w / norm;
                        for k in 0..view.classes {
                            let i = view.at(pos, k);
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            s[i] += scale * (probs[i] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv { logits, view, probs, teacher, weights, norm } => {
                if self.ng(*logits) {
                    let s = slot(grads, *logits, probs.len());
                    for pos in 0..view.positions() {
                        let w = weights.as_ref().map_or(1.0, |w| w[pos]);
                        if w == 0.0 {
                            continue;
                        }
                        let mass: f64 = (0..view.classes).map(|k| teacher[view.at(pos, k)]).sum();
                        let scale = g[0] * w / norm;
                        for k in 0..view.classes {
                            let i = view.at(pos, k);
                            s[i] += scale * (mass * probs[i] - teacher[i]);
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / da.len() as f64;
                if self.ng(*a) {
                    let s = slot(grads, *a, da.len());
                    for ((s, x), y) in s.iter_mut().zip(da).zip(db) {
                        *s += c * (x - y);
                    }
                }
                if self.ng(*b) {
                    let s = slot(grads, *b, db.len());
                    for ((s, x), y) in s.iter_mut().zip(da).zip(db) {
                        *s -= c * (x - y);
                    }
                }
            }
            Op::StraightThrough { z } => {
                if self.ng(*z) {
                    add_into(slot(grads, *z, g.len()), g);
                }
            }
            Op::Gather { table, indices, code_channels, plane } => {
                if self.ng(*table) {
                    let d = self.shape(*table)[1];
                    let s = slot(grads, *table, self.value(*table).numel());
                    let items = indices.len() / (code_channels * plane);
                    for b in 0..items {
                        for ch in 0..*code_channels {
                            for p in 0..*plane {
                                let code = indices[(b * code_channels + ch) * plane + p];
                                for j in 0..d {
                                    s[code * d + j] += g[((b * code_channels + ch) * d + j) * plane + p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn check_weights(op: &'static str, weights: Option<&[f64]>, positions: usize) -> Result<f64> {
    match weights {
        None => Ok(positions as f64),
        Some(w) => {
            if w.len() != positions {
                return Err(Error::shape(op, format!("{} weights for {positions} positions", w.len())));
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("{op}: weights must be finite and non-negative")));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidArgument(format!("{op}: no selected positions")));
            }
            Ok(total)
        }
    }
}
