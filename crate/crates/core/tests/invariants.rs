//! Randomized checks of the autoregressive net and hierarchy contracts,
//! driven through the public API only.

use pixelstack::auxiliary::AuxConfig;
use pixelstack::data::synth_textures;
use pixelstack::hierarchy::{train_hierarchy, LevelSpec, PriorSpec};
use pixelstack::pixelcnn::{sample, AutoregressiveNet, ConditionalDecoder, IncrementalSampler, PixelCnnConfig, SampleMode, SamplerConfig};
use pixelstack::rng;
use pixelstack::tensor::{Module, Tape};
use pixelstack::train::TrainConfig;
use pixelstack::{IntTensor, Tensor};
use proptest::prelude::*;

fn random_image(shape: [usize; 4], bins: usize, seed: u64) -> IntTensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    IntTensor::new(shape, (0..n).map(|_| rng::below(&mut r, bins as u64) as u16).collect()).unwrap()
}

/// Random weights and biases, so that no path is silently zero.
fn jittered_net(config: PixelCnnConfig, seed: u64) -> AutoregressiveNet {
    let mut r = rng::seeded(seed);
    let mut net = AutoregressiveNet::new("px", config, &mut r).unwrap();
    net.visit_mut(&mut |p| {
        for v in p.value.data_mut() {
            *v += 0.2 * rng::normal(&mut r);
        }
    });
    net
}

fn logits(net: &AutoregressiveNet, x: &IntTensor, cond: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let c = cond.map(|c| tape.constant(c.clone()));
    let l = net.forward(&mut tape, x, c).unwrap();
    tape.value(l).clone()
}

/// Logits of raster position `(i, j, g)`, item 0, from `[N, B, G, H, W]`.
fn at(l: &Tensor, i: usize, j: usize, g: usize) -> Vec<f64> {
    let s = l.shape();
    let (bins, groups, h, w) = (s[1], s[2], s[3], s[4]);
    (0..bins).map(|b| l.data()[((b * groups + g) * h + i) * w + j]).collect()
}

fn tiny_level(downsample: usize) -> LevelSpec {
    LevelSpec {
        encoder_layers: 1,
        encoder_width: 8,
        aux: AuxConfig { layers: 1, width: 8, ..Default::default() },
        decoder_layers: 2,
        decoder_hidden: 8,
        modulator_layers: 1,
        modulator_width: 8,
        code_bits: 2,
        code_dim: 4,
        downsample,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbing_a_position_leaves_earlier_logits_unchanged(
        layers in 0usize..4,
        rgb in any::<bool>(),
        h in 2usize..6,
        w in 2usize..6,
        frac in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let groups = if rgb { 3 } else { 1 };
        let bins = 4;
        let net = jittered_net(PixelCnnConfig::new(layers, 6, bins, groups), seed);
        let x = random_image([1, groups, h, w], bins, seed + 1);
        let order = net.raster(h, w);
        let t = ((order.len() - 1) as f64 * frac) as usize;
        let (i, j, g) = order.position(t);
        let mut y = x.clone();
        y.set(0, g, i, j, ((x.get(0, g, i, j) as usize + 1) % bins) as u16);
        let (a, b) = (logits(&net, &x, None), logits(&net, &y, None));
        for s in 0..=t {
            let (i, j, g) = order.position(s);
            prop_assert_eq!(at(&a, i, j, g), at(&b, i, j, g), "position {} moved after a change at {}", s, t);
        }
    }

    #[test]
    fn zero_modulator_is_the_unconditional_net(seed in 0u64..1000, layers in 1usize..4) {
        let mut r = rng::seeded(seed);
        let mut dec = ConditionalDecoder::new("dec", PixelCnnConfig::new(layers, 4, 4, 1), 1, 4, 2, 1, 6, &mut r).unwrap();
        dec.modulator.out = dec.modulator.out.clone().zero_init();
        let x = random_image([2, 1, 6, 6], 4, seed + 1);
        let codes = random_image([2, 1, 3, 3], 4, seed + 2);
        let mut tape = Tape::new();
        let l = dec.forward(&mut tape, &x, &codes).unwrap();
        prop_assert_eq!(tape.value(l), &logits(&dec.local, &x, None));
    }

    #[test]
    fn incremental_sampling_is_naive_sampling(
        layers in 0usize..4,
        rgb in any::<bool>(),
        h in 1usize..5,
        w in 1usize..5,
        temperature in 0.3f64..2.0,
        seed in 0u64..1000,
    ) {
        let groups = if rgb { 3 } else { 1 };
        let mut config = PixelCnnConfig::new(layers, 6, 4, groups);
        config.classes = if layers > 0 { 2 } else { 0 };
        let net = jittered_net(config, seed);
        let cond = (layers > 0).then(|| {
            let mut tape = Tape::new();
            let c = net.conditioning(&mut tape, None, Some(&[0, 1])).unwrap().unwrap();
            tape.value(c).clone()
        });
        let naive = SamplerConfig { temperature, seed, mode: SampleMode::Naive };
        let inc = SamplerConfig { mode: SampleMode::Incremental, ..naive };
        prop_assert_eq!(
            sample(&net, cond.as_ref(), 2, h, w, &naive).unwrap(),
            sample(&net, cond.as_ref(), 2, h, w, &inc).unwrap()
        );
    }

    #[test]
    fn sampler_cache_tracks_a_fresh_forward(layers in 1usize..4, seed in 0u64..1000) {
        let net = jittered_net(PixelCnnConfig::new(layers, 6, 4, 3), seed);
        let mut s = IncrementalSampler::new(&net, None, 1, 3, 4).unwrap();
        let mut r = rng::seeded(seed);
        for t in 0..s.order().len() {
            s.step(t, 1.0, &mut r).unwrap();
            prop_assert!(s.cache_error(t).unwrap() <= 1e-12);
        }
    }
}

proptest! {
    // each case trains a small hierarchy
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn hierarchy_contracts(depth in 1usize..3, downsample in 1usize..3, seed in 0u64..1000) {
        let data = synth_textures(12, 8, 8, 2, 2, seed).unwrap();
        let specs = vec![tiny_level(downsample); depth];
        let prior = PriorSpec { layers: 2, hidden: 8, conditional: false, steps: None };
        let train = TrainConfig { steps: 3, batch: 4, lr: 3e-3, polyak: 0.0, log_every: 0 };
        let (model, _) = train_hierarchy(&data, &specs, &prior, &train, seed).unwrap();

        // every partial encode/decode round trip returns images of the input shape
        let x = data.images.select(&[0, 1]);
        let cfg = SamplerConfig { seed, ..Default::default() };
        for k in 0..=depth {
            let r = model.reconstruct(&x, k, &cfg).unwrap();
            prop_assert_eq!(r.shape(), x.shape());
            prop_assert_eq!(&r, &model.reconstruct(&x, k, &cfg).unwrap());
        }
        let chain = model.encode_chain(&x, depth).unwrap();
        prop_assert_eq!(chain.len(), depth + 1);
        prop_assert_eq!(model.sample(None, 2, &cfg).unwrap(), model.sample(None, 2, &cfg).unwrap());

        for report in model.joint_nll(&data.images, None).unwrap() {
            let sum = report.levels.iter().sum::<f64>() + report.prior;
            prop_assert!((report.total - sum).abs() <= 1e-9 * sum.abs());
            prop_assert_eq!(report.levels.len(), depth);
        }
    }
}
