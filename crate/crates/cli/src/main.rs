//! `pixelstack`: train, sample, reconstruct, evaluate and run the
//! experiments of a hierarchical autoregressive image model.
//!
//! Exit codes: 0 success, 1 assertion or trend failure (including training
//! divergence), 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pixelstack::pixelcnn::SampleMode;

#[derive(Parser, Debug)]
#[command(name = "pixelstack", version, about = "Hierarchical autoregressive image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Naive,
    Incremental,
}

impl From<Mode> for SampleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Naive => SampleMode::Naive,
            Mode::Incremental => SampleMode::Incremental,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic texture dataset (IDT1).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        classes: u16,
        #[arg(long, default_value_t = 3)]
        bits: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every level and the prior; write manifest, checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `global.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only the first K levels; 0 trains the prior on pixels.
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Ancestral samples tiled into one image.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class: Option<u16>,
        #[arg(long, default_value_t = 1)]
        n: u32,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Mode::Incremental)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Originals in column 0 and K sampled reconstructions beside them.
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Images taken from the start of the dataset.
        #[arg(long, default_value_t = 8)]
        n: u32,
        /// Levels encoded before sampling back down; defaults to all.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 0.99)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image joint NLL and its mean.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code predictability sweep over one aux setting; exit 1 if the trend fails.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma separated settings, at least three.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only run the trend check on an existing sweep CSV.
        #[arg(long, conflicts_with_all = ["config", "dataset", "values", "out", "seed"])]
        check: Option<PathBuf>,
    },
    /// End-to-end baseline against an aux-trained level; exit 1 if the drift trend fails.
    Pathology {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(commands::Outcome::Passed) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Failed(why)) => {
            eprintln!("failed: {why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", commands::describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
