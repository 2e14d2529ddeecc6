use super::*;
use crate::rng;
use crate::tensor::{gradient_check, Adam};

fn random_image(shape: [usize; 4], bins: usize, seed: u64) -> IntTensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    IntTensor::new(shape, (0..n).map(|_| rng::below(&mut r, bins as u64) as u16).collect()).unwrap()
}

fn net(layers: usize, hidden: usize, bins: usize, groups: usize, seed: u64) -> AutoregressiveNet {
    let mut r = rng::seeded(seed);
    let mut net = AutoregressiveNet::new("px", PixelCnnConfig::new(layers, hidden, bins, groups), &mut r).unwrap();
    // non-zero biases so that every path is exercised
    net.visit_mut(&mut |p| {
        if p.name.ends_with(".b") {
            for v in p.value.data_mut() {
                *v = 0.3 * rng::normal(&mut r);
            }
        }
    });
    net
}

fn logits_of(net: &AutoregressiveNet, x: &IntTensor, cond: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let c = cond.map(|c| tape.constant(c.clone()));
    let l = net.forward(&mut tape, x, c).unwrap();
    tape.value(l).clone()
}

/// Logits `[B]` of raster position `(i, j, g)` of item `n`.
fn logit_row(l: &Tensor, n: usize, i: usize, j: usize, g: usize) -> Vec<f64> {
    let s = l.shape();
    let (bins, groups, h, w) = (s[1], s[2], s[3], s[4]);
    (0..bins).map(|b| l.data()[(((n * bins + b) * groups + g) * h + i) * w + j]).collect()
}

#[test]
fn raster_index_is_a_bijection() {
    let o = RasterOrder { height: 3, width: 4, groups: 3 };
    let mut seen = vec![false; o.len()];
    for i in 0..3 {
        for j in 0..4 {
            for g in 0..3 {
                let t = o.index(i, j, g);
                assert!(!seen[t]);
                seen[t] = true;
                assert_eq!(o.position(t), (i, j, g));
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn zero_layer_net_has_constant_logits() {
    let net = net(0, 0, 4, 1, 1);
    let x = random_image([2, 1, 5, 5], 4, 2);
    let l = logits_of(&net, &x, None);
    let first = logit_row(&l, 0, 0, 0, 0);
    for n in 0..2 {
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(logit_row(&l, n, i, j, 0), first);
            }
        }
    }
}

fn check_causality(layers: usize, groups: usize, seed: u64) {
    let bins = 4;
    let net = net(layers, 6, bins, groups, seed);
    let (h, w) = (5, 6);
    let x = random_image([1, groups, h, w], bins, seed + 1);
    let base = logits_of(&net, &x, None);
    let order = net.raster(h, w);
    for t in [0, 7, order.len() / 2, order.len() - 1] {
        let (i, j, g) = order.position(t);
        let mut y = x.clone();
        y.set(0, g, i, j, ((x.get(0, g, i, j) as usize + 1) % bins) as u16);
        let pert = logits_of(&net, &y, None);
        for s in 0..=t {
            let (a, b, c) = order.position(s);
            assert_eq!(logit_row(&base, 0, a, b, c), logit_row(&pert, 0, a, b, c), "position {s} saw a change at {t}");
        }
        if t + 1 < order.len() {
            // later positions do see the change, at least somewhere
            let later_changed = (t + 1..order.len()).any(|s| {
                let (a, b, c) = order.position(s);
                logit_row(&base, 0, a, b, c) != logit_row(&pert, 0, a, b, c)
            });
            assert!(later_changed, "perturbation at {t} is invisible");
        }
    }
}

#[test]
fn causality_grayscale() {
    check_causality(3, 1, 10);
}

#[test]
fn causality_rgb() {
    check_causality(3, 3, 20);
}

#[test]
fn causality_head_only_rgb() {
    check_causality(0, 3, 30);
}

#[test]
fn zero_modulator_matches_unconditional() {
    let mut r = rng::seeded(5);
    let cfg = PixelCnnConfig::new(2, 6, 4, 1);
    let mut dec = ConditionalDecoder::new("dec", cfg, 1, 4, 2, 1, 8, &mut r).unwrap();
    dec.modulator.out = dec.modulator.out.clone().zero_init();
    let x = random_image([2, 1, 6, 6], 4, 6);
    let codes = random_image([2, 1, 3, 3], 4, 7);
    let mut tape = Tape::new();
    let cond = dec.forward(&mut tape, &x, &codes).unwrap();
    let with = tape.value(cond).clone();
    let without = logits_of(&dec.local, &x, None);
    assert_eq!(with, without);
}

#[test]
fn conditioning_changes_logits() {
    let mut r = rng::seeded(8);
    let dec = ConditionalDecoder::new("dec", PixelCnnConfig::new(2, 6, 4, 1), 1, 4, 2, 1, 8, &mut r).unwrap();
    let x = random_image([1, 1, 4, 4], 4, 1);
    let logits = |codes: &IntTensor| {
        let mut tape = Tape::new();
        let l = dec.forward(&mut tape, &x, codes).unwrap();
        tape.value(l).clone()
    };
    let a = logits(&IntTensor::zeros([1, 1, 2, 2]));
    let b = logits(&IntTensor::new([1, 1, 2, 2], vec![3, 3, 3, 3]).unwrap());
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn modulator_geometry_mismatch_is_an_error() {
    let mut r = rng::seeded(8);
    let dec = ConditionalDecoder::new("dec", PixelCnnConfig::new(1, 4, 4, 1), 1, 4, 2, 1, 8, &mut r).unwrap();
    let mut tape = Tape::new();
    let res = dec.forward(&mut tape, &IntTensor::zeros([1, 1, 4, 4]), &IntTensor::zeros([1, 1, 3, 3]));
    assert!(matches!(res, Err(Error::Geometry(_))));
}

#[test]
fn out_of_range_input_is_rejected() {
    let net = net(1, 4, 4, 1, 1);
    let x = IntTensor::new([1, 1, 1, 2], vec![0, 4]).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(net.forward(&mut tape, &x, None), Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn uniform_logits_bits_per_dim() {
    for (bins, expect) in [(256usize, 8.0), (2, 1.0)] {
        let x = random_image([2, 1, 3, 3], bins, 3);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![2, bins, 1, 3, 3]));
        let loss = nll(&mut tape, l, &x).unwrap();
        assert!((bits_per_dim(tape.value(loss).item()) - expect).abs() < 1e-12);
    }
}

#[test]
fn nll_per_item_sums_positions() {
    let x = random_image([3, 1, 2, 2], 4, 9);
    let per = nll_per_item(&Tensor::zeros(vec![3, 4, 1, 2, 2]), &x).unwrap();
    for v in per {
        assert!((v - 4.0 * 4f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn gated_block_and_nll_gradients() {
    let net = net(2, 6, 3, 1, 4);
    let x = random_image([1, 1, 4, 4], 3, 5);
    let targets = x.clone();
    let input = Tensor::from_fn(vec![1, 6, 4, 4], |i| ((i * 37 % 17) as f64 - 8.0) / 9.0);
    let f = |tape: &mut Tape, v: Var| -> Result<Var> {
        let c = tape.constant(Tensor::from_fn(vec![1, 12, 1, 1], |i| 0.1 * i as f64 - 0.5));
        let h = net.blocks[1].forward(tape, v, Some(c))?;
        let h = tape.relu(h)?;
        let l = net.head.forward(tape, h)?;
        let l = tape.reshape(l, vec![1, 3, 1, 4, 4])?;
        nll(tape, l, &targets)
    };
    let report = gradient_check(f, &input, 1e-6, 1e-5).unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn draw_histogram_matches_softmax() {
    let logits: [f64; 5] = [0.3, -1.2, 2.0, 0.0, 0.9];
    let t: f64 = 0.8;
    let z: f64 = logits.iter().map(|l| (l / t).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l / t).exp() / z).collect();
    let draws = 100_000;
    let mut r = rng::seeded(77);
    let mut counts = [0usize; 5];
    for _ in 0..draws {
        counts[draw(&logits, t, rng::unit(&mut r))] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let expect = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - expect).abs() < 3.0 * sigma, "count {c} vs {expect} ± {sigma}");
    }
}

#[test]
fn sampled_histogram_matches_net_conditional() {
    // one-position image: the sampled value's distribution is the net's first conditional
    let net = net(2, 4, 4, 1, 12);
    let logits = logit_row(&logits_of(&net, &IntTensor::zeros([1, 1, 1, 1]), None), 0, 0, 0, 0);
    let t = 1.3;
    let z: f64 = logits.iter().map(|l| (l / t).exp()).sum();
    let n = 100_000;
    let cfg = SamplerConfig { temperature: t, seed: 4, mode: SampleMode::Incremental };
    let x = sample(&net, None, n, 1, 1, &cfg).unwrap();
    let mut counts = [0usize; 4];
    for &v in x.data() {
        counts[v as usize] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let p = (logits[b] / t).exp() / z;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma);
    }
}

#[test]
fn equal_logits_are_a_fair_coin() {
    let mut r = rng::seeded(1);
    let n = 100_000;
    let ones: usize = (0..n).map(|_| draw(&[0.0, 0.0], 0.37, rng::unit(&mut r))).sum();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((ones as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
}

#[test]
fn tiny_temperature_takes_argmax() {
    let net = net(2, 4, 5, 1, 13);
    let cfg = SamplerConfig { temperature: 1e-9, seed: 1, mode: SampleMode::Incremental };
    let x = sample(&net, None, 2, 3, 3, &cfg).unwrap();
    let l = logits_of(&net, &x, None);
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let row = logit_row(&l, n, i, j, 0);
                let best = (0..5).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(x.get(n, 0, i, j) as usize, best);
            }
        }
    }
}

#[test]
fn non_positive_temperature_rejected() {
    let net = net(1, 4, 4, 1, 1);
    for t in [0.0, -1.0, f64::NAN] {
        let cfg = SamplerConfig { temperature: t, ..Default::default() };
        assert!(sample(&net, None, 1, 2, 2, &cfg).is_err());
    }
}

#[test]
fn sampling_is_deterministic() {
    let net = net(2, 6, 4, 3, 14);
    for mode in [SampleMode::Naive, SampleMode::Incremental] {
        let cfg = SamplerConfig { temperature: 1.0, seed: 99, mode };
        assert_eq!(sample(&net, None, 2, 4, 4, &cfg).unwrap(), sample(&net, None, 2, 4, 4, &cfg).unwrap());
    }
}

fn class_net(seed: u64) -> AutoregressiveNet {
    let mut r = rng::seeded(seed);
    let mut cfg = PixelCnnConfig::new(3, 6, 4, 3);
    cfg.classes = 2;
    let mut net = AutoregressiveNet::new("px", cfg, &mut r).unwrap();
    net.visit_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v += 0.05 * rng::normal(&mut r);
        }
    });
    net
}

fn class_cond(net: &AutoregressiveNet, labels: &[u16]) -> Tensor {
    let mut tape = Tape::new();
    let c = net.conditioning(&mut tape, None, Some(labels)).unwrap().unwrap();
    tape.value(c).clone()
}

#[test]
fn incremental_equals_naive() {
    for seed in 0..4 {
        let net = class_net(40 + seed);
        let cond = class_cond(&net, &[0, 1]);
        let naive = SamplerConfig { temperature: 0.9, seed, mode: SampleMode::Naive };
        let inc = SamplerConfig { mode: SampleMode::Incremental, ..naive };
        let a = sample(&net, Some(&cond), 2, 4, 5, &naive).unwrap();
        let b = sample(&net, Some(&cond), 2, 4, 5, &inc).unwrap();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn incremental_equals_naive_with_spatial_condition() {
    let mut r = rng::seeded(3);
    let dec = ConditionalDecoder::new("dec", PixelCnnConfig::new(2, 4, 4, 1), 1, 3, 2, 1, 6, &mut r).unwrap();
    let codes = random_image([2, 1, 3, 3], 3, 2);
    let cond = dec.condition_values(&codes, 6, 6).unwrap();
    for seed in 0..3 {
        let naive = SamplerConfig { temperature: 1.0, seed, mode: SampleMode::Naive };
        let inc = SamplerConfig { mode: SampleMode::Incremental, ..naive };
        assert_eq!(sample(&dec.local, Some(&cond), 2, 6, 6, &naive).unwrap(), sample(&dec.local, Some(&cond), 2, 6, 6, &inc).unwrap());
    }
}

#[test]
fn cache_matches_fresh_forward() {
    let net = class_net(50);
    let cond = class_cond(&net, &[1]);
    let mut s = IncrementalSampler::new(&net, Some(&cond), 1, 4, 4).unwrap();
    let mut r = rng::seeded(2);
    for t in 0..s.order().len() {
        s.step(t, 1.0, &mut r).unwrap();
        assert!(s.cache_error(t).unwrap() <= 1e-12);
    }
}

#[test]
fn conditioning_on_zero_layer_net_is_an_error() {
    let net = net(0, 0, 4, 1, 1);
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::zeros(vec![1, 1, 1, 1]));
    assert!(net.forward(&mut tape, &IntTensor::zeros([1, 1, 2, 2]), Some(c)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut a = class_net(60);
    a.enable_polyak(0.5).unwrap();
    let header = CheckpointHeader { layers: 3, hidden: 6, bins: 4, groups: 3 };
    let ck = Checkpoint::capture(header, &a);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pxs");
    write_checkpoint(&path, &ck).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.header, header);
    let mut b = class_net(61);
    back.restore(&mut b).unwrap();
    let x = random_image([1, 3, 3, 3], 4, 1);
    assert_eq!(logits_of(&a, &x, None), logits_of(&b, &x, None));
}

#[test]
fn checkpoint_errors() {
    let a = net(1, 4, 4, 1, 1);
    let bytes = Checkpoint::capture(CheckpointHeader::default(), &a).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version(9))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    let mut other = net(2, 4, 4, 1, 1);
    assert!(Checkpoint::from_bytes(&bytes).unwrap().restore(&mut other).is_err());
}

#[test]
fn model_nll_is_bounded_by_source_entropy() {
    // product distribution with known per-position marginal
    let probs: [f64; 4] = [0.5, 0.25, 0.125, 0.125];
    let entropy: f64 = probs.iter().map(|p| -p * p.ln()).sum();
    let mut r = rng::seeded(70);
    let mut gen = |n: usize| {
        let data = (0..n * 16)
            .map(|_| {
                let u = rng::unit(&mut r);
                let mut acc = 0.0;
                probs.iter().position(|p| {
                    acc += p;
                    u < acc
                }).unwrap_or(3) as u16
            })
            .collect();
        IntTensor::new([n, 1, 4, 4], data).unwrap()
    };
    let mut model = net(1, 4, 4, 1, 71);
    let mut opt = Adam::new(0.02).unwrap();
    for _ in 0..150 {
        let x = gen(16);
        let mut tape = Tape::new();
        let l = model.forward(&mut tape, &x, None).unwrap();
        let loss = nll(&mut tape, l, &x).unwrap();
        let grads = tape.backward(loss).unwrap();
        model.zero_grads();
        model.accumulate(&grads);
        opt.step(&mut model);
    }
    let test = gen(500);
    let mut tape = Tape::new();
    let l = model.forward(&mut tape, &test, None).unwrap();
    let loss = nll(&mut tape, l, &test).unwrap();
    let model_nll = tape.value(loss).item();
    // standard error of the empirical entropy over 8000 positions
    let var: f64 = probs.iter().map(|p| p * p.ln().powi(2)).sum::<f64>() - entropy * entropy;
    let se = (var / 8000.0).sqrt();
    assert!(model_nll >= entropy - 3.0 * se, "model {model_nll} below entropy {entropy}");
    assert!(model_nll < entropy + 0.05, "model {model_nll} did not learn the marginal {entropy}");
}
