use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pixelstack::checks::{gradient_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use pixelstack::config::RunConfig;
use pixelstack::data::{load_dataset, save_dataset, synth_textures, write_csv, write_pgm_grid, Dataset};
use pixelstack::hierarchy::{check_trend, code_predictability_sweep, read_sweep_csv, train_hierarchy, write_sweep_csv, HierarchicalModel, SweepAxis, SweepSettings};
use pixelstack::pathology::run_pathology;
use pixelstack::pixelcnn::{SampleMode, SamplerConfig};
use pixelstack::train::TrainConfig;
use pixelstack::{rng, Error, IntTensor};
use serde::Serialize;

use crate::Command;

pub enum Outcome {
    Passed,
    Failed(String),
}

/// Divergence is a run failure; every other error is treated as bad input.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => 1,
        _ => 2,
    }
}

/// The error chain on one line, skipping causes a message already ends with.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Caps the rayon pool at `PIXELSTACK_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PIXELSTACK_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("PIXELSTACK_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    Ok(())
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth { out, n, height, width, classes, bits, seed } => {
            let ds = synth_textures(n, height, width, classes, bits, seed)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
            Ok(Outcome::Passed)
        }
        Command::Train { config, dataset, out, seed, levels } => train(&config, &dataset, &out, seed, levels),
        Command::Sample { manifest, class, n, temperature, seed, mode, out } => sample(&manifest, class, n as usize, SamplerConfig { temperature, seed, mode: mode.into() }, &out),
        Command::Reconstruct { manifest, dataset, k, n, depth, temperature, seed, out } => {
            reconstruct(&manifest, &dataset, k, n as usize, depth, SamplerConfig { temperature, seed, mode: SampleMode::Incremental }, &out)
        }
        Command::Eval { manifest, dataset, out } => eval(&manifest, &dataset, &out),
        Command::Sweep { axis, config, dataset, values, out, seed, check } => {
            let axis: SweepAxis = axis.parse()?;
            match check {
                Some(csv) => trend_outcome(axis, &read_sweep_csv(&csv)?),
                None => {
                    let (Some(config), Some(dataset), Some(out)) = (config, dataset, out) else {
                        bail!("sweep needs --config, --dataset and --out (or --check CSV)");
                    };
                    sweep(axis, &config, &dataset, &values, &out, seed)
                }
            }
        }
        Command::Pathology { config, dataset, out, seed } => pathology(&config, &dataset, &out, seed),
        Command::Gradcheck { out } => gradcheck(out.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(path)?;
    if let Some(s) = seed {
        cfg.global.seed = s;
    }
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.resolved.toml");
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct DivergenceSnapshot<'a> {
    phase: &'a str,
    step: usize,
    detail: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn train(config: &Path, dataset: &Path, out: &Path, seed: Option<u64>, levels: Option<usize>) -> Result<Outcome> {
    let mut cfg = load_config(config, seed)?;
    if let Some(k) = levels {
        let have = cfg.levels()?.len();
        if k > have {
            bail!(Error::Config(format!("--levels {k} but the config defines {have} level sections")));
        }
        cfg.truncate_levels(k);
    }
    let data = load_dataset(dataset)?;
    create_dir(out)?;
    write_resolved(&cfg, out)?;
    let specs = cfg.levels()?;
    let (model, metrics) = match train_hierarchy(&data, &specs, &cfg.prior, &cfg.global.train(), cfg.global.seed) {
        Ok(v) => v,
        Err(e @ Error::Divergence { .. }) => {
            if let Error::Divergence { phase, step, detail } = &e {
                let snap = DivergenceSnapshot { phase, step: *step, detail, seed: cfg.global.seed, config: &cfg };
                let path = out.join("divergence.toml");
                fs::write(&path, toml::to_string(&snap)?).with_context(|| format!("writing {}", path.display()))?;
                eprintln!("diagnostic snapshot written to {}", path.display());
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    for (name, m) in &metrics {
        m.write(&out.join(format!("metrics_{name}.csv")), Some(&out.join(format!("timing_{name}.csv"))))?;
    }
    let manifest = model.save(out)?;
    println!("wrote {}", manifest.display());
    Ok(Outcome::Passed)
}

/// File extension for a grid of `groups`-channel images.
fn grid_ext(groups: usize) -> &'static str {
    if groups == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

#[derive(Serialize)]
struct SampleMetadata {
    image: String,
    class: Option<u16>,
    n: usize,
    seed: u64,
    temperature: f64,
    mode: SampleMode,
    levels: usize,
}

fn sample(manifest: &Path, class: Option<u16>, n: usize, cfg: SamplerConfig, out: &Path) -> Result<Outcome> {
    if n == 0 {
        bail!(Error::InvalidArgument("--n must be at least 1".into()));
    }
    let model = HierarchicalModel::load(manifest)?;
    let labels = class.map(|c| vec![c; n]);
    let images = model.sample(labels.as_deref(), n, &cfg)?;
    create_dir(out)?;
    let class_tag = class.map_or("any".to_string(), |c| c.to_string());
    let stem = format!("sample_class{class_tag}_seed{}_t{}", cfg.seed, cfg.temperature);
    let image = format!("{stem}.{}", grid_ext(model.pixels.groups));
    let cols = (n as f64).sqrt().ceil() as usize;
    write_pgm_grid(&images, model.pixel_bits, cols, &out.join(&image))?;
    let meta = SampleMetadata { image: image.clone(), class, n, seed: cfg.seed, temperature: cfg.temperature, mode: cfg.mode, levels: model.depth() };
    let meta_path = out.join(format!("{stem}.toml"));
    fs::write(&meta_path, toml::to_string(&meta)?).with_context(|| format!("writing {}", meta_path.display()))?;
    println!("wrote {}", out.join(image).display());
    Ok(Outcome::Passed)
}

fn first_images(data: &Dataset, n: usize) -> Result<IntTensor> {
    if n == 0 || n > data.len() {
        bail!(Error::InvalidArgument(format!("--n must be in 1..={}, got {n}", data.len())));
    }
    Ok(data.images.select(&(0..n).collect::<Vec<_>>()))
}

fn reconstruct(manifest: &Path, dataset: &Path, k: usize, n: usize, depth: Option<usize>, cfg: SamplerConfig, out: &Path) -> Result<Outcome> {
    let model = HierarchicalModel::load(manifest)?;
    let data = load_dataset(dataset)?;
    let x = first_images(&data, n)?;
    let depth = depth.unwrap_or(model.levels.len());
    let recons = (1..=k)
        .map(|j| model.reconstruct(&x, depth, &SamplerConfig { seed: rng::derive(cfg.seed, j as u64), ..cfg }))
        .collect::<pixelstack::Result<Vec<_>>>()?;
    // row i: original, then its k reconstructions
    let [_, g, h, w] = x.shape();
    let mut grid = Vec::with_capacity(n * (k + 1) * x.item_len());
    for i in 0..n {
        grid.extend_from_slice(x.item(i).data());
        for r in &recons {
            grid.extend_from_slice(r.item(i).data());
        }
    }
    let grid = IntTensor::new([n * (k + 1), g, h, w], grid)?;
    create_dir(out)?;
    let path = out.join(format!("reconstruct_depth{depth}_k{k}_seed{}_t{}.{}", cfg.seed, cfg.temperature, grid_ext(g)));
    write_pgm_grid(&grid, model.pixel_bits, k + 1, &path)?;
    println!("wrote {}", path.display());
    Ok(Outcome::Passed)
}

fn eval(manifest: &Path, dataset: &Path, out: &Path) -> Result<Outcome> {
    let model = HierarchicalModel::load(manifest)?;
    let data = load_dataset(dataset)?;
    let labels = model.prior_spec.conditional.then_some(data.labels.as_slice());
    let reports = model.joint_nll(&data.images, labels)?;
    let levels = model.levels.len();
    let mut header: Vec<String> = vec!["image".into()];
    header.extend((1..=levels).map(|l| format!("level{l}_nats")));
    header.extend(["prior_nats", "total_nats", "bits_per_dim"].map(String::from));
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![i.to_string()];
            row.extend(r.levels.iter().map(|v| v.to_string()));
            row.extend([r.prior, r.total, r.bits_per_dim].map(|v| v.to_string()));
            row
        })
        .collect();
    let count = reports.len() as f64;
    let mean = |f: &dyn Fn(&pixelstack::hierarchy::JointNllReport) -> f64| reports.iter().map(f).sum::<f64>() / count;
    let mut row = vec!["mean".to_string()];
    row.extend((0..levels).map(|l| mean(&|r| r.levels[l]).to_string()));
    let mean_bits = mean(&|r| r.bits_per_dim);
    row.extend([mean(&|r| r.prior), mean(&|r| r.total), mean_bits].map(|v| v.to_string()));
    rows.push(row);
    create_dir(out)?;
    let path = out.join("eval.csv");
    write_csv(&path, &header, &rows)?;
    println!("mean joint NLL {mean_bits:.6} bits/dim over {} images", reports.len());
    Ok(Outcome::Passed)
}

fn trend_outcome(axis: SweepAxis, rows: &[pixelstack::hierarchy::SweepRow]) -> Result<Outcome> {
    let trend = check_trend(axis, rows)?;
    println!("{} trend: spearman rho {:.4}, expected sign {:+}", axis.name(), trend.rho, axis.expected_sign());
    Ok(if trend.held { Outcome::Passed } else { Outcome::Failed(format!("{} trend did not hold (rho {:.4})", axis.name(), trend.rho)) })
}

fn sweep(axis: SweepAxis, config: &Path, dataset: &Path, values: &[usize], out: &Path, seed: Option<u64>) -> Result<Outcome> {
    if values.len() < 3 {
        bail!(Error::InvalidArgument(format!("a trend needs at least 3 sweep values, got {}", values.len())));
    }
    let cfg = load_config(config, seed)?;
    let base = *cfg.levels()?.first().ok_or_else(|| Error::Config("sweep needs a [level.1] section as the base setting".into()))?;
    let data = load_dataset(dataset)?;
    let train = cfg.global.train();
    let settings = SweepSettings {
        level: base,
        prior: cfg.prior,
        encoder_train: TrainConfig { steps: cfg.sweep.encoder_steps, ..train },
        prior_train: TrainConfig { steps: cfg.sweep.prior_steps, ..train },
        seed: cfg.global.seed,
    };
    let rows = code_predictability_sweep(&data, axis, values, &settings)?;
    create_dir(out)?;
    write_resolved(&cfg, out)?;
    let path = out.join(format!("sweep_{}.csv", axis.name()));
    write_sweep_csv(&path, &rows)?;
    for r in &rows {
        println!("{} {:>3}  perplexity {:8.3}  nll {:.4} bits/position", axis.name(), r.setting, r.perplexity, r.nll_bits_per_position);
    }
    trend_outcome(axis, &rows)
}

fn pathology(config: &Path, dataset: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome> {
    let cfg = load_config(config, seed)?;
    let spec = *cfg.levels()?.first().ok_or_else(|| Error::Config("pathology needs a [level.1] section".into()))?;
    let data = load_dataset(dataset)?;
    let run = run_pathology(&data, &spec, &cfg.global.train(), cfg.pathology.images, &cfg.sampler, cfg.global.seed)?;
    create_dir(out)?;
    write_resolved(&cfg, out)?;
    let (header, rows) = run.report.csv();
    write_csv(&out.join("drift.csv"), &header, &rows)?;
    // side by side: original, reconstruction
    for (name, recon) in [("baseline", &run.baseline_recon), ("aux", &run.aux_recon)] {
        let mut pairs = Vec::new();
        for i in 0..run.originals.batch() {
            pairs.extend_from_slice(run.originals.item(i).data());
            pairs.extend_from_slice(recon.item(i).data());
        }
        let [n, g, h, w] = run.originals.shape();
        let grid = IntTensor::new([2 * n, g, h, w], pairs)?;
        write_pgm_grid(&grid, data.bits, 2, &out.join(format!("pathology_{name}.pgm")))?;
    }
    let ((bm, bs), (am, as_)) = (run.report.baseline_stats(), run.report.aux_stats());
    println!("baseline drift {bm:.4} ± {bs:.4}, teacher-forced {:.4} bits/dim", run.report.baseline_nll_bits);
    println!("aux drift      {am:.4} ± {as_:.4}, teacher-forced {:.4} bits/dim", run.report.aux_nll_bits);
    Ok(if run.report.trend_held() { Outcome::Passed } else { Outcome::Failed(format!("baseline drift {bm:.4} is below aux drift {am:.4}")) })
}

fn gradcheck(out: Option<&Path>) -> Result<Outcome> {
    let suite = gradient_suite(DEFAULT_STEP, DEFAULT_TOLERANCE)?;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for c in &suite {
        let status = if c.report.passed { "pass" } else { "FAIL" };
        println!("{status} {:<24} max rel err {:.3e}", c.name, c.report.max_rel_error);
        if !c.report.passed {
            failed.push(c.name);
        }
        rows.push(vec![c.name.to_string(), c.report.max_rel_error.to_string(), c.report.passed.to_string()]);
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_csv(&dir.join("gradcheck.csv"), &["check", "max_rel_error", "passed"], &rows)?;
    }
    Ok(if failed.is_empty() { Outcome::Passed } else { Outcome::Failed(format!("gradient checks failed: {}", failed.join(", "))) })
}
