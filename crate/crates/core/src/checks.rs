//! Finite-difference gradient checks over every differentiable tape op and
//! a gated-block network with its NLL, run as one suite.

use std::sync::Arc;

use crate::error::Result;
use crate::pixelcnn::{make_weight_mask, nll, AutoregressiveNet, MaskKind, MaskedConvSpec, PixelCnnConfig};
use crate::rng;
use crate::tensor::{gradient_check, softmax_values, GradCheckReport, IntTensor, Module, Tape, Tensor, Var};

/// Step and tolerance used by the command line check.
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng::unit(&mut r) * 2.0 - 1.0)
}

fn image(shape: [usize; 4], bins: usize, seed: u64) -> IntTensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    IntTensor::new(shape, (0..n).map(|_| rng::below(&mut r, bins as u64) as u16).collect()).expect("valid image")
}

/// Reduces any tensor to a scalar with a non-uniform weighting, so that
/// a backward rule returning the wrong permutation is caught.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(t.shape(y).to_vec(), |i| ((i * 7919 % 23) as f64 - 11.0) / 7.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    GradCheckReport { max_rel_error, worst_index, analytic, numeric, passed: max_rel_error < tol }
}

/// Runs every check at step `h` and relative tolerance `tol`.
pub fn gradient_suite(h: f64, tol: f64) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: Result<GradCheckReport>| -> Result<()> {
        out.push(NamedCheck { name, report: report? });
        Ok(())
    };

    let x = uniform(&[2, 3, 5, 4], 1);
    let w = uniform(&[4, 3, 3, 3], 2);
    let bias = uniform(&[4], 3);
    push(
        "conv2d_input",
        gradient_check(
            |t, v| {
                let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
                let y = t.conv2d(v, wv, bv, None, 1)?;
                weighted_sum(t, y)
            },
            &x,
            h,
            tol,
        ),
    )?;
    push(
        "conv2d_weight_strided",
        gradient_check(
            |t, wv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(bias.clone()));
                let y = t.conv2d(xv, wv, bv, None, 2)?;
                weighted_sum(t, y)
            },
            &w,
            h,
            tol,
        ),
    )?;
    push(
        "conv2d_bias",
        gradient_check(
            |t, bv| {
                let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv2d(xv, wv, bv, None, 1)?;
                weighted_sum(t, y)
            },
            &bias,
            h,
            tol,
        ),
    )?;
    let mask = Arc::new(make_weight_mask(&MaskedConvSpec { kind: MaskKind::A, kernel: 3, groups: 1, in_channels: 3, out_channels: 4 })?);
    push(
        "masked_conv2d_weight",
        gradient_check(
            |t, wv| {
                let (xv, bv) = (t.constant(x.clone()), t.constant(bias.clone()));
                let y = t.conv2d(xv, wv, bv, Some(mask.clone()), 1)?;
                weighted_sum(t, y)
            },
            &w,
            h,
            tol,
        ),
    )?;

    let d = uniform(&[2, 8, 2, 3], 4);
    push("depth_to_space", gradient_check(|t, v| { let y = t.depth_to_space(v, 2)?; weighted_sum(t, y) }, &d, h, tol))?;
    let s = uniform(&[2, 2, 4, 6], 5);
    push("space_to_depth", gradient_check(|t, v| { let y = t.space_to_depth(v, 2)?; weighted_sum(t, y) }, &s, h, tol))?;

    let u = uniform(&[3, 7], 6);
    push("relu", gradient_check(|t, v| { let y = t.relu(v)?; weighted_sum(t, y) }, &u, h, tol))?;
    push("tanh", gradient_check(|t, v| { let y = t.tanh(v)?; weighted_sum(t, y) }, &u, h, tol))?;
    push("sigmoid", gradient_check(|t, v| { let y = t.sigmoid(v)?; weighted_sum(t, y) }, &u, h, tol))?;
    push("map", gradient_check(|t, v| { let y = t.map(v, |a| a.sin(), |a| a.cos())?; weighted_sum(t, y) }, &u, h, tol))?;

    let a = uniform(&[2, 3, 4], 7);
    let b = uniform(&[1, 3, 1], 8);
    push("add_broadcast", gradient_check(|t, v| { let bv = t.constant(a.clone()); let y = t.add(bv, v)?; let y = t.tanh(y)?; weighted_sum(t, y) }, &b, h, tol))?;
    push("sub", gradient_check(|t, v| { let bv = t.constant(b.clone()); let y = t.sub(bv, v)?; let y = t.tanh(y)?; weighted_sum(t, y) }, &a, h, tol))?;
    push("mul_broadcast", gradient_check(|t, v| { let av = t.constant(a.clone()); let y = t.mul(av, v)?; weighted_sum(t, y) }, &b, h, tol))?;
    push("scale", gradient_check(|t, v| { let y = t.scale(v, -2.5)?; weighted_sum(t, y) }, &a, h, tol))?;
    push("sum", gradient_check(|t, v| { let y = t.mul(v, v)?; t.sum(y) }, &a, h, tol))?;
    push("mean", gradient_check(|t, v| { let y = t.mul(v, v)?; t.mean(y) }, &a, h, tol))?;
    push("reshape", gradient_check(|t, v| { let y = t.reshape(v, vec![4, 6])?; weighted_sum(t, y) }, &a, h, tol))?;
    push("narrow", gradient_check(|t, v| { let y = t.narrow(v, 2, 1, 2)?; weighted_sum(t, y) }, &a, h, tol))?;

    let logits = uniform(&[2, 5, 3], 9);
    let targets = [0, 4, 2, 1, 3, 3];
    let weights = [1.0, 0.0, 2.0, 0.5, 1.0, 1.0];
    push("cross_entropy_weighted", gradient_check(|t, v| t.cross_entropy(v, 1, &targets, Some(&weights)), &logits, h, tol))?;
    let teacher = softmax_values(&uniform(&[2, 5, 3], 10), 1)?;
    push("kl_divergence", gradient_check(|t, v| t.kl_divergence(&teacher, v, 1, Some(&weights)), &logits, h, tol))?;
    let target = uniform(&[2, 5, 3], 11);
    push("mse", gradient_check(|t, v| { let c = t.constant(target.clone()); t.mse(v, c) }, &logits, h, tol))?;
    // the forward value ignores z, so the tape gradient into z is compared
    // with the numeric gradient of the downstream function taken at the
    // quantized value
    let quantized = uniform(&[2, 5, 3], 12);
    let downstream = |t: &mut Tape, y: Var| -> Result<Var> {
        let y = t.tanh(y)?;
        weighted_sum(t, y)
    };
    let reference = gradient_check(downstream, &quantized, h, tol)?;
    let mut tape = Tape::new();
    let z = tape.variable(logits.clone());
    let y = tape.straight_through(z, quantized.clone())?;
    let loss = downstream(&mut tape, y)?;
    let analytic = tape.backward(loss)?.get(z).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; logits.numel()]);
    push("straight_through", Ok(compare(analytic, reference.numeric, tol)))?;
    let table = uniform(&[4, 3], 13);
    let indices = [0, 3, 3, 1, 2, 0];
    push("gather_codes", gradient_check(|t, v| { let y = t.gather_codes(v, &indices, [1, 2, 1, 3])?; weighted_sum(t, y) }, &table, h, tol))?;

    // a two-block, three-group net with its NLL, differentiated through
    // the conditioning input that every gated block receives
    let mut r = rng::seeded(14);
    let mut net = AutoregressiveNet::new("px", PixelCnnConfig::new(2, 6, 3, 3), &mut r)?;
    net.visit_mut(&mut |p| {
        if p.name.ends_with(".b") {
            for v in p.value.data_mut() {
                *v = 0.3 * rng::normal(&mut r);
            }
        }
    });
    let pixels = image([2, 3, 4, 4], 3, 15);
    let cond = uniform(&[2, net.config.cond_channels(), 4, 4], 16);
    push(
        "gated_net_nll",
        gradient_check(
            |t, v| {
                let l = net.forward(t, &pixels, Some(v))?;
                nll(t, l, &pixels)
            },
            &cond,
            h,
            tol,
        ),
    )?;
    let hidden = uniform(&[1, 6, 4, 4], 17);
    let block_cond = uniform(&[1, 12, 1, 1], 18);
    let one = image([1, 3, 4, 4], 3, 19);
    push(
        "gated_block_input",
        gradient_check(
            |t, v| {
                let c = t.constant(block_cond.clone());
                let y = net.blocks[1].forward(t, v, Some(c))?;
                let y = t.relu(y)?;
                let l = net.head.forward(t, y)?;
                let l = t.reshape(l, vec![1, 3, 3, 4, 4])?;
                nll(t, l, &one)
            },
            &hidden,
            h,
            tol,
        ),
    )?;
    Ok(out)
}
