//! Masked self-prediction: a teacher predicts the centre of masked square
//! regions from their surroundings, and its predictions are distilled into
//! a student that sees the unmasked input through the code bottleneck.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ResStack};
use crate::rng::{self, Rng};
use crate::tensor::{IntTensor, Module, Parameter, Tape, Tensor, Var};

/// Masks for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MspMask {
    /// Offset `s`; each region is `(2s+1) × (2s+1)`.
    pub offset: usize,
    pub positions: Vec<(usize, usize)>,
    /// `m_i`, 0 inside any region (clipped at the border), 1 elsewhere; `[H·W]`.
    pub input: Vec<f64>,
    /// `m_o`, 1 exactly at the selected positions; `[H·W]`.
    pub output: Vec<f64>,
}

pub fn make_msp_mask(positions: &[(usize, usize)], offset: usize, h: usize, w: usize) -> Result<MspMask> {
    let mut input = vec![1.0; h * w];
    let mut output = vec![0.0; h * w];
    for &(pi, pj) in positions {
        if pi >= h || pj >= w {
            return Err(Error::IndexOutOfRange { op: "msp mask position", index: pi.max(pj), limit: h.min(w) });
        }
        output[pi * w + pj] = 1.0;
        for i in pi.saturating_sub(offset)..(pi + offset + 1).min(h) {
            for j in pj.saturating_sub(offset)..(pj + offset + 1).min(w) {
                input[i * w + j] = 0.0;
            }
        }
    }
    Ok(MspMask { offset, positions: positions.to_vec(), input, output })
}

/// Masked regions per image: the full-scale table (for 64×64 inputs)
/// scaled by `H·W / 4096`, floored, and at least 1.
pub fn positions_per_image(side: usize, h: usize, w: usize) -> Result<usize> {
    if side % 2 == 0 {
        return Err(Error::EvenKernel(side, side));
    }
    let base = match side {
        1 | 3 => 30,
        5 | 7 => 10,
        9..=15 => 3,
        _ => 1,
    };
    Ok((base * h * w / 4096).max(1))
}

/// Uniform random positions, drawn independently (regions may overlap).
pub fn random_positions(count: usize, h: usize, w: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    (0..count).map(|_| (rng::below(r, h as u64) as usize, rng::below(r, w as u64) as usize)).collect()
}

/// Masks for a whole batch, stacked as `[N·H·W]` input and output masks.
/// `count` of 0 takes the per-image count from [`positions_per_image`].
pub fn batch_masks(n: usize, side: usize, count: usize, h: usize, w: usize, r: &mut Rng) -> Result<(Vec<MspMask>, Vec<f64>, Vec<f64>)> {
    let count = if count == 0 { positions_per_image(side, h, w)? } else { count };
    if side % 2 == 0 {
        return Err(Error::EvenKernel(side, side));
    }
    let masks: Vec<MspMask> = (0..n).map(|_| make_msp_mask(&random_positions(count, h, w, r), side / 2, h, w)).collect::<Result<_>>()?;
    let input = masks.iter().flat_map(|m| m.input.iter().copied()).collect();
    let output = masks.iter().flat_map(|m| m.output.iter().copied()).collect();
    Ok((masks, input, output))
}

/// Per-position weights for `[N, B, G, H, W]` logits from an `[N·H·W]`
/// output mask: every channel group of a selected position counts.
pub fn group_weights(output: &[f64], n: usize, groups: usize, plane: usize) -> Vec<f64> {
    let mut wts = Vec::with_capacity(n * groups * plane);
    for b in 0..n {
        for _ in 0..groups {
            wts.extend_from_slice(&output[b * plane..(b + 1) * plane]);
        }
    }
    wts
}

/// Residual net over the masked one-hot input, predicting every position.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub bins: usize,
    pub groups: usize,
    pub input: Conv2d,
    pub stack: ResStack,
    pub out: Conv2d,
}

impl Teacher {
    pub fn new(name: &str, bins: usize, groups: usize, layers: usize, width: usize, rng: &mut Rng) -> Self {
        Teacher {
            bins,
            groups,
            input: Conv2d::new(&format!("{name}.in"), bins * groups, width, 3, 1, rng),
            stack: ResStack::new(&format!("{name}.res"), layers, width, rng),
            out: Conv2d::new(&format!("{name}.out"), width, bins * groups, 1, 1, rng),
        }
    }

    /// Logits `[N, B, G, H, W]` from `x` with masked positions encoded as
    /// all-zero vectors (`keep` is the `[N·H·W]` input mask).
    pub fn forward(&self, tape: &mut Tape, x: &IntTensor, keep: &[f64]) -> Result<Var> {
        let [n, g, h, w] = x.shape();
        let v = tape.constant(x.one_hot(self.bins, Some(keep))?);
        let y = self.input.forward(tape, v)?;
        let y = self.stack.forward(tape, y)?;
        let y = tape.relu(y)?;
        let y = self.out.forward(tape, y)?;
        tape.reshape(y, vec![n, self.bins, g, h, w])
    }
}

impl Module for Teacher {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.input.visit(f);
        self.stack.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.input.visit_mut(f);
        self.stack.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// Mean NLL of the true values at the selected positions.
pub fn teacher_loss(tape: &mut Tape, logits: Var, x: &IntTensor, output: &[f64]) -> Result<Var> {
    let [n, g, h, w] = x.shape();
    let wts = group_weights(output, n, g, h * w);
    tape.cross_entropy(logits, 1, &x.to_indices(), Some(&wts))
}

/// Mean `KL(teacher ‖ student)` over the selected positions; the teacher
/// distribution is a constant.
pub fn distill_loss(tape: &mut Tape, teacher_probs: &Tensor, student_logits: Var, weights: &[f64]) -> Result<Var> {
    tape.kl_divergence(teacher_probs, student_logits, 1, Some(weights))
}
