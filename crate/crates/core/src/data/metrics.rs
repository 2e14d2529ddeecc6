use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub seconds: f64,
    pub metrics: Vec<(String, f64)>,
}

/// Collects metric rows for one run.
///
/// Metric values go to one CSV and wall-clock times to another, so that the
/// metrics file of a seeded run is byte-identical across reruns.
#[derive(Clone, Debug)]
pub struct MetricsWriter {
    start: Instant,
    pub rows: Vec<MetricRow>,
}

impl Default for MetricsWriter {
    fn default() -> Self {
        MetricsWriter { start: Instant::now(), rows: Vec::new() }
    }
}

impl MetricsWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a row; steps must strictly increase and names must match the
    /// first row's.
    pub fn push(&mut self, step: u64, metrics: Vec<(String, f64)>) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if step <= last.step {
                return Err(Error::InvalidArgument(format!("metric step {step} does not follow {}", last.step)));
            }
            let same = last.metrics.len() == metrics.len() && last.metrics.iter().zip(&metrics).all(|(a, b)| a.0 == b.0);
            if !same {
                return Err(Error::InvalidArgument(format!("metric names changed at step {step}")));
            }
        }
        self.rows.push(MetricRow { step, seconds: self.start.elapsed().as_secs_f64(), metrics });
        Ok(())
    }

    /// Values of one named metric, in step order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)).collect()
    }

    pub fn write(&self, metrics_path: &Path, timing_path: Option<&Path>) -> Result<()> {
        let mut header = vec!["step".to_string()];
        if let Some(first) = self.rows.first() {
            header.extend(first.metrics.iter().map(|(n, _)| n.clone()));
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| std::iter::once(r.step.to_string()).chain(r.metrics.iter().map(|(_, v)| v.to_string())).collect())
            .collect();
        write_csv(metrics_path, &header, &rows)?;
        if let Some(p) = timing_path {
            let rows: Vec<Vec<String>> = self.rows.iter().map(|r| vec![r.step.to_string(), format!("{:.6}", r.seconds)]).collect();
            write_csv(p, &["step".to_string(), "seconds".to_string()], &rows)?;
        }
        Ok(())
    }
}

/// Writes a header row and records with RFC 4180 quoting.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|s| s.as_ref()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV file into its header and records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}
