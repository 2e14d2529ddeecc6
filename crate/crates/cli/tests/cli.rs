use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[global]
seed = 1
steps = 8
batch = 4
polyak = 0.0
log_every = 2

[level.1]
encoder_width = 8
decoder_layers = 2
decoder_hidden = 8
modulator_width = 8
code_bits = 2
code_dim = 4
aux = { layers = 1, width = 8 }

[prior]
layers = 2
hidden = 8
conditional = true
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixelstack")).args(args).env("PIXELSTACK_THREADS", "1").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a config and dataset, trains, and returns the manifest path.
fn trained(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("c.toml"), CONFIG).unwrap();
    let data = dir.join("d.idt");
    assert!(run(&["synth", "--out", s(&data), "--n", "24", "--height", "8", "--width", "8", "--classes", "3", "--bits", "2"]).status.success());
    let out = run(&["train", "--config", s(&dir.join("c.toml")), "--dataset", s(&data), "--out", s(&dir.join("run"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("run/manifest.toml")
}

#[test]
fn train_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = trained(tmp.path());
    let run_dir = manifest.parent().unwrap();
    for f in ["manifest.toml", "level1.pxs", "prior.pxs", "config.resolved.toml", "metrics_level1.csv", "metrics_prior.csv", "timing_level1.csv", "timing_prior.csv"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let header = fs::read_to_string(run_dir.join("metrics_level1.csv")).unwrap();
    assert!(header.starts_with("step,loss,aux,nll_bits_per_dim,perplexity"), "{header}");
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = trained(tmp.path());
    let run_dir = manifest.parent().unwrap();
    let again = tmp.path().join("again");
    let out = run(&["train", "--config", s(&run_dir.join("config.resolved.toml")), "--dataset", s(&tmp.path().join("d.idt")), "--out", s(&again)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["level1.pxs", "prior.pxs", "manifest.toml", "metrics_prior.csv", "config.resolved.toml"] {
        assert_eq!(fs::read(run_dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), CONFIG).unwrap();
    let missing = tmp.path().join("no_such_dataset.idt");
    let out = run(&["train", "--config", s(&tmp.path().join("c.toml")), "--dataset", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_dataset.idt"), "{}", stderr(&out));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[global]\nstesp = 3\n").unwrap();
    let out = run(&["train", "--config", s(&bad), "--dataset", "x.idt", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stesp"), "{}", stderr(&out));
    let out = run(&["sweep", "--axis", "aux_depth", "--values", "0,2", "--config", s(&bad), "--dataset", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["sweep", "--axis", "sideways", "--check", "x.csv"]).status.code(), Some(2));
}

#[test]
fn sample_records_settings_and_rejects_bad_class() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = trained(tmp.path());
    let out_dir = tmp.path().join("s");
    let args = ["sample", "--manifest", s(&manifest), "--class", "2", "--n", "1", "--temperature", "0.97", "--seed", "4", "--out", s(&out_dir)];
    assert!(run(&args).status.success());
    let image = out_dir.join("sample_class2_seed4_t0.97.pgm");
    let first = fs::read(&image).unwrap();
    assert!(run(&args).status.success());
    assert_eq!(fs::read(&image).unwrap(), first);
    let meta = fs::read_to_string(out_dir.join("sample_class2_seed4_t0.97.toml")).unwrap();
    assert!(meta.contains("temperature = 0.97"), "{meta}");

    let out = run(&["sample", "--manifest", s(&manifest), "--class", "7", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("0..3"), "{}", stderr(&out));
}

#[test]
fn reconstruct_grid_layout_and_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = trained(tmp.path());
    let data = tmp.path().join("d.idt");
    let grid = |k: &str, seed: &str| {
        let out = tmp.path().join(format!("r{k}_{seed}"));
        assert!(run(&["reconstruct", "--manifest", s(&manifest), "--dataset", s(&data), "--k", k, "--n", "3", "--seed", seed, "--out", s(&out)]).status.success());
        let f = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
        pixelstack::data::read_pnm(&f).unwrap()
    };
    // 8x8 tiles with one-pixel gutters
    let originals = grid("0", "1");
    assert_eq!((originals.width, originals.height), (8, 3 * 8 + 2));
    let two = grid("2", "1");
    assert_eq!((two.width, two.height), (3 * 8 + 2, 3 * 8 + 2));
    // column 0 holds the originals
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(two.data[i * two.width + j], originals.data[i * originals.width + j]);
        }
    }
    assert_ne!(grid("2", "1").data, grid("2", "2").data);
}

#[test]
fn eval_mean_row_is_the_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = trained(tmp.path());
    let out = tmp.path().join("e");
    assert!(run(&["eval", "--manifest", s(&manifest), "--dataset", s(&tmp.path().join("d.idt")), "--out", s(&out)]).status.success());
    let (header, rows) = pixelstack::data::read_csv(&out.join("eval.csv")).unwrap();
    assert_eq!(header, ["image", "level1_nats", "prior_nats", "total_nats", "bits_per_dim"]);
    let (mean, per) = rows.split_last().unwrap();
    assert_eq!(mean[0], "mean");
    assert_eq!(per.len(), 24);
    for col in 1..header.len() {
        let m: f64 = per.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / per.len() as f64;
        assert!((m - mean[col].parse::<f64>().unwrap()).abs() <= 1e-9 * m.abs().max(1.0));
    }
}

#[test]
fn trend_check_on_shuffled_csv_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("shuffled.csv");
    fs::write(&csv, "setting,perplexity,nll_bits_per_position\n0,4.0,1.9\n2,6.0,1.2\n4,9.0,3.4\n").unwrap();
    assert_eq!(run(&["sweep", "--axis", "aux_depth", "--check", s(&csv)]).status.code(), Some(1));
    fs::write(&csv, "setting,perplexity,nll_bits_per_position\n0,4.0,1.2\n2,6.0,1.9\n4,9.0,3.4\n").unwrap();
    assert_eq!(run(&["sweep", "--axis", "aux_depth", "--check", s(&csv)]).status.code(), Some(0));
    assert_eq!(run(&["sweep", "--axis", "mask_side", "--check", s(&csv)]).status.code(), Some(1));
}

#[test]
fn prior_only_training_has_a_steady_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let config = "[global]\nseed = 2\nsteps = 400\nbatch = 8\npolyak = 0.0\nlog_every = 1\n\n[level.1]\n\n[prior]\nlayers = 2\nhidden = 8\n";
    fs::write(tmp.path().join("c.toml"), config).unwrap();
    let data = tmp.path().join("d.idt");
    assert!(run(&["synth", "--out", s(&data), "--n", "32", "--height", "6", "--width", "6", "--bits", "2"]).status.success());
    let out_dir = tmp.path().join("p");
    let out = run(&["train", "--config", s(&tmp.path().join("c.toml")), "--dataset", s(&data), "--out", s(&out_dir), "--levels", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(!out_dir.join("level1.pxs").exists());
    let resolved = fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap();
    assert!(!resolved.contains("[level."), "{resolved}");

    let (header, rows) = pixelstack::data::read_csv(&out_dir.join("metrics_prior.csv")).unwrap();
    let col = header.iter().position(|h| h == "loss").unwrap();
    let loss: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
    assert_eq!(loss.len(), 400);
    // no 100-step window mean exceeds the previous window's by more than 5%
    let means: Vec<f64> = (0..=loss.len() - 100).map(|s| loss[s..s + 100].iter().sum::<f64>() / 100.0).collect();
    for w in 100..means.len() {
        assert!(means[w] <= 1.05 * means[w - 100], "window at {w}: {} after {}", means[w], means[w - 100]);
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_pixelstack")).args(["gradcheck"]).env("PIXELSTACK_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        pixelstack::config::RunConfig::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
