//! Times naive against incremental sampling and writes the speedups as CSV.
//!
//! Usage: `sampler_speedup [OUT.csv]` (default `sampler_speedup.csv`).

use std::path::PathBuf;

use pixelstack::data::write_csv;
use pixelstack_bench::{sampler_speedup, SpeedupRow};

fn main() -> pixelstack::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "sampler_speedup.csv".into());
    let mut rows = Vec::new();
    for (layers, size) in [(8, 8), (8, 16), (4, 16)] {
        let row = sampler_speedup(layers, 32, size, 1, 3)?;
        println!("{layers} layers, {size}x{size}: naive {:.3}s, incremental {:.3}s, speedup {:.1}x", row.naive_seconds, row.incremental_seconds, row.speedup());
        rows.push(row.record());
    }
    write_csv(&out, &SpeedupRow::header(), &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
