use proptest::prelude::*;

use super::*;
use crate::data::synth_textures;
use crate::tensor::Tensor;

fn enc_cfg(r: usize, bins: usize) -> EncoderConfig {
    EncoderConfig { layers: 1, width: 8, downsample: r, channels: 1, code_dim: 4, in_bins: bins, in_groups: 1 }
}

fn vq_cfg(k: usize) -> VqConfig {
    VqConfig { k, d: 4, ..Default::default() }
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch: 8, lr: 3e-3, polyak: 0.0, log_every: 1 }
}

#[test]
fn mask_example_clips_at_border() {
    let m = make_msp_mask(&[(0, 0), (3, 4)], 1, 4, 5).unwrap();
    #[rustfmt::skip]
    let input = [
        0., 0., 1., 1., 1.,
        0., 0., 1., 1., 1.,
        1., 1., 1., 0., 0.,
        1., 1., 1., 0., 0.,
    ];
    assert_eq!(m.input, input);
    let mut output = vec![0.0; 20];
    output[0] = 1.0;
    output[19] = 1.0;
    assert_eq!(m.output, output);
    assert!(make_msp_mask(&[(4, 0)], 1, 4, 5).is_err());
}

proptest! {
    #[test]
    fn mask_matches_chebyshev_definition(
        h in 1usize..9, w in 1usize..9, s in 0usize..4,
        raw in proptest::collection::vec((0usize..64, 0usize..64), 0..6),
    ) {
        let pos: Vec<(usize, usize)> = raw.iter().map(|&(i, j)| (i % h, j % w)).collect();
        let m = make_msp_mask(&pos, s, h, w).unwrap();
        for i in 0..h {
            for j in 0..w {
                let covered = pos.iter().any(|&(pi, pj)| pi.abs_diff(i).max(pj.abs_diff(j)) <= s);
                prop_assert_eq!(m.input[i * w + j], if covered { 0.0 } else { 1.0 });
                prop_assert_eq!(m.output[i * w + j], if pos.contains(&(i, j)) { 1.0 } else { 0.0 });
                // every selected centre is hidden from the teacher
                if m.output[i * w + j] == 1.0 {
                    prop_assert_eq!(m.input[i * w + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn positions_table() {
    assert_eq!(positions_per_image(1, 64, 64).unwrap(), 30);
    assert_eq!(positions_per_image(3, 64, 64).unwrap(), 30);
    assert_eq!(positions_per_image(5, 64, 64).unwrap(), 10);
    assert_eq!(positions_per_image(7, 64, 64).unwrap(), 10);
    assert_eq!(positions_per_image(9, 64, 64).unwrap(), 3);
    assert_eq!(positions_per_image(15, 64, 64).unwrap(), 3);
    assert_eq!(positions_per_image(17, 64, 64).unwrap(), 1);
    assert_eq!(positions_per_image(3, 32, 32).unwrap(), 7);
    assert_eq!(positions_per_image(3, 16, 16).unwrap(), 1);
    assert!(positions_per_image(4, 64, 64).is_err());
}

#[test]
fn duplicate_positions_do_not_change_masks() {
    let a = make_msp_mask(&[(2, 2)], 1, 5, 5).unwrap();
    let b = make_msp_mask(&[(2, 2), (2, 2)], 1, 5, 5).unwrap();
    assert_eq!(a.input, b.input);
    assert_eq!(a.output, b.output);
}

#[test]
fn masked_pixel_differs_from_black_pixel() {
    let x = IntTensor::new([1, 1, 1, 2], vec![0, 0]).unwrap();
    let v = x.one_hot(4, Some(&[0.0, 1.0])).unwrap();
    // position 0 is masked (all zeros), position 1 is a real 0 (one-hot)
    assert_eq!(v.data(), &[0., 1., 0., 0., 0., 0., 0., 0.]);
}

#[test]
fn uniform_teacher_costs_two_bits_over_four_bins() {
    let x = IntTensor::new([1, 1, 2, 2], vec![0, 1, 2, 3]).unwrap();
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(vec![1, 4, 1, 2, 2]));
    let loss = teacher_loss(&mut tape, logits, &x, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let bits = tape.value(loss).item() / std::f64::consts::LN_2;
    assert!((bits - 2.0).abs() < 1e-12);
}

#[test]
fn distill_of_point_mass_into_uniform_is_ln2() {
    let teacher = Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let student = tape.variable(Tensor::zeros(vec![1, 2, 1, 1, 2]));
    // only position 0 is selected; position 1 would contribute 0 anyway
    let kl = distill_loss(&mut tape, &teacher, student, &[1.0, 0.0]).unwrap();
    assert!((tape.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn teacher_gets_no_gradient_from_distillation() {
    let mut r = rng::seeded(4);
    let teacher = Teacher::new("t", 4, 1, 1, 6, &mut r);
    let x = IntTensor::new([1, 1, 3, 3], vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
    let m = make_msp_mask(&[(1, 1)], 1, 3, 3).unwrap();
    let mut tape = Tape::new();
    let t_logits = teacher.forward(&mut tape, &x, &m.input).unwrap();
    let probs = softmax_values(tape.value(t_logits), 1).unwrap();
    let student = tape.variable(Tensor::zeros(vec![1, 4, 1, 3, 3]));
    let kl = distill_loss(&mut tape, &probs, student, &m.output).unwrap();
    let grads = tape.backward(kl).unwrap();
    assert!(grads.get(student).is_some());
    teacher.visit(&mut |p| {
        let g = grads.param(p.key());
        assert!(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{} received gradient", p.name);
    });
}

#[test]
fn teacher_ignores_masked_values() {
    let mut r = rng::seeded(5);
    let teacher = Teacher::new("t", 4, 1, 2, 6, &mut r);
    let m = make_msp_mask(&[(2, 2)], 1, 5, 5).unwrap();
    let a = IntTensor::new([1, 1, 5, 5], (0..25).map(|v| (v % 4) as u16).collect()).unwrap();
    let mut b = a.clone();
    for i in 1..4 {
        for j in 1..4 {
            b.set(0, 0, i, j, 3 - b.get(0, 0, i, j));
        }
    }
    let run = |x: &IntTensor| {
        let mut tape = Tape::new();
        let l = teacher.forward(&mut tape, x, &m.input).unwrap();
        tape.value(l).clone()
    };
    let (la, lb) = (run(&a), run(&b));
    // the centre prediction cannot depend on anything inside its own region
    for bin in 0..4 {
        let at = bin * 25 + 2 * 5 + 2;
        assert_eq!(la.data()[at], lb.data()[at]);
    }
}

#[test]
fn ff_losses_match_hand_values() {
    let x = IntTensor::zeros([1, 1, 2, 2]);
    let mut tape = Tape::new();
    let out = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.25));
    let mse = ff_aux_loss(&mut tape, AuxLoss::MsePixels, out, &x, 256).unwrap();
    assert!((tape.value(mse).item() - 0.0625).abs() < 1e-15);

    let logits = tape.constant(Tensor::zeros(vec![1, 256, 1, 2, 2]));
    let ce = ff_aux_loss(&mut tape, AuxLoss::Categorical, logits, &x, 256).unwrap();
    assert!((tape.value(ce).item() / std::f64::consts::LN_2 - 8.0).abs() < 1e-12);
}

#[test]
fn loss_kind_follows_level() {
    assert!(loss_for_level(0).is_err());
    assert_eq!(loss_for_level(1).unwrap(), AuxLoss::MsePixels);
    for l in 2..6 {
        assert_eq!(loss_for_level(l).unwrap(), AuxLoss::Categorical);
    }
}

#[test]
fn ff_output_is_cropped_to_input() {
    let mut r = rng::seeded(6);
    let cfg = FfAuxConfig { in_channels: 4, layers: 1, width: 4, upsample: 4, loss: AuxLoss::Categorical, out_bins: 3, out_groups: 2 };
    let aux = FfAux::new("a", cfg, &mut r).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(vec![2, 4, 2, 2]));
    let out = aux.forward(&mut tape, z, 7, 6).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 2, 7, 6]);
    assert!(aux.forward(&mut tape, z, 9, 6).is_err());
}

#[test]
fn encoder_geometry_and_determinism() {
    let mut r = rng::seeded(7);
    let cfg = enc_cfg(4, 4);
    assert_eq!(cfg.out_kernel(), 5);
    assert_eq!(EncoderConfig { downsample: 3, ..cfg }.out_kernel(), 5);
    assert_eq!(cfg.out_geometry(10, 8), (3, 2));
    let enc = Encoder::new("e", cfg, &mut r).unwrap();
    let mut cb = Codebook::new("", vq_cfg(8), &mut r).unwrap();
    let data = synth_textures(5, 10, 8, 2, 2, 1).unwrap();
    let mut tape = Tape::new();
    let z = enc.forward(&mut tape, &data.images).unwrap();
    assert_eq!(tape.shape(z), &[5, 4, 3, 2]);
    cb.init_from(tape.value(z), &mut r).unwrap();
    let a = enc.encode(&cb, &data.images, 2).unwrap();
    let b = enc.encode(&cb, &data.images, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [5, 1, 3, 2]);
}

#[test]
fn msp_even_mask_rejected() {
    let mut r = rng::seeded(8);
    let aux = AuxConfig { kind: AuxKind::Msp, mask_side: 4, ..Default::default() };
    assert!(EncoderStack::new("", 1, enc_cfg(2, 4), vq_cfg(4), aux, &mut r).is_err());
}

#[test]
fn identical_images_share_code_maps() {
    let images = IntTensor::new([16, 1, 8, 8], vec![2; 16 * 64]).unwrap();
    let data = Dataset::new(images, vec![0; 16], 2, 1).unwrap();
    let (enc, cb) = train_encoder_ff(&data, 1, enc_cfg(2, 4), vq_cfg(8), AuxConfig { layers: 1, width: 8, ..Default::default() }, &small_train(5), 3).unwrap();
    let codes = enc.encode(&cb, &data.images, 5).unwrap();
    let first = codes.item(0);
    for i in 1..16 {
        assert_eq!(codes.item(i), first);
    }
    // at any one position the code histogram is a point mass
    let column: Vec<u16> = (0..16).map(|i| codes.get(i, 0, 2, 2)).collect();
    assert_eq!(crate::vq::perplexity(&column, 8), 1.0);
}

#[test]
fn ff_training_reduces_reconstruction_error() {
    let data = synth_textures(32, 8, 8, 2, 2, 2).unwrap();
    let mut stack = EncoderStack::new("", 1, enc_cfg(2, 4), vq_cfg(8), AuxConfig { layers: 1, width: 8, ..Default::default() }, &mut rng::seeded(1)).unwrap();
    let m = train_encoder(&mut stack, &data, &small_train(60), 2).unwrap();
    let aux = m.series("aux");
    let head: f64 = aux[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = aux[aux.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "aux loss {head} -> {tail}");
}

#[test]
fn msp_training_runs_and_teacher_improves() {
    let data = synth_textures(32, 8, 8, 2, 2, 3).unwrap();
    let aux = AuxConfig { kind: AuxKind::Msp, layers: 1, width: 8, mask_side: 3, teacher_layers: 1, teacher_width: 8, positions: 0 };
    let mut stack = EncoderStack::new("", 1, enc_cfg(2, 4), vq_cfg(8), aux, &mut rng::seeded(1)).unwrap();
    let m = train_encoder(&mut stack, &data, &small_train(60), 2).unwrap();
    let s = m.series("aux");
    assert!(s.iter().all(|v| v.is_finite()));
    let head: f64 = s[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = s[s.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "msp loss {head} -> {tail}");
    let (enc, cb) = stack.into_retained();
    assert_eq!(enc.encode(&cb, &data.images, 8).unwrap().shape(), [32, 1, 4, 4]);
}

#[test]
fn baseline_trains_end_to_end() {
    let data = synth_textures(16, 8, 8, 2, 2, 4).unwrap();
    let cfg = BaselineConfig { encoder: enc_cfg(2, 4), vq: vq_cfg(8), decoder: crate::pixelcnn::PixelCnnConfig::new(2, 8, 4, 1), mod_layers: 1, mod_width: 8 };
    let (model, m) = train_end_to_end_baseline(&data, &cfg, &small_train(20), 5).unwrap();
    let s = m.series("nll_bits_per_dim");
    assert!(s.last().unwrap() < &s[0]);
    let per = model.nll_per_item(&data.images).unwrap();
    assert_eq!(per.len(), 16);
    assert!(per.iter().all(|v| v.is_finite() && *v > 0.0));
}
