//! Round metrics as JSON lines, plus the plot-data CSV export.
//!
//! One object per line, append-safe. The schema only ever grows: readers must
//! tolerate missing optional fields, so old logs stay loadable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use fedsim_core::orchestrate::RoundMetrics;
use fedsim_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u32,
    pub cohort_size: u32,
    pub deferred: u32,
    pub stale_used: u32,
    pub delta_tau: f64,
    pub eta_server: f64,
    pub stale_weight_sum: f64,
    pub stale_error_norm: f64,
    pub stale_error_bound: f64,
    pub payload_bytes: u64,
    pub idealized_bytes: f64,
    pub bandwidth_gain: f64,
    pub epsilon_spent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

impl MetricsRecord {
    /// Wraps engine round metrics. Wall time is deliberately dropped so logs
    /// are byte-identical across machines and worker counts.
    pub fn from_round(m: &RoundMetrics, bandwidth_gain: f64) -> Self {
        Self {
            round: m.round,
            cohort_size: m.cohort_size,
            deferred: m.deferred,
            stale_used: m.stale_used,
            delta_tau: m.delta_tau,
            eta_server: m.eta_server,
            stale_weight_sum: m.stale_weight_sum,
            stale_error_norm: m.stale_error_norm,
            stale_error_bound: m.stale_error_bound,
            payload_bytes: m.payload_bytes,
            idealized_bytes: m.idealized_bytes,
            bandwidth_gain,
            epsilon_spent: m.epsilon_spent,
            test_accuracy: None,
            test_loss: None,
        }
    }

    /// The round-0 record: initial evaluation before any training.
    pub fn initial(bandwidth_gain: f64) -> Self {
        Self {
            round: 0,
            cohort_size: 0,
            deferred: 0,
            stale_used: 0,
            delta_tau: 0.0,
            eta_server: 0.0,
            stale_weight_sum: 0.0,
            stale_error_norm: 0.0,
            stale_error_bound: 0.0,
            payload_bytes: 0,
            idealized_bytes: 0.0,
            bandwidth_gain,
            epsilon_spent: 0.0,
            test_accuracy: None,
            test_loss: None,
        }
    }
}

/// Streams records to disk one line at a time.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Format { offset: 0, msg: format!("serialize metrics: {e}") })?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a whole metrics log; parse failures cite the 1-based line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: i + 1,
            msg: format!("metrics line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Formats an f64 with the shortest representation that parses back exactly.
fn csv_f64(x: f64) -> String {
    format!("{x}")
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(csv_f64).unwrap_or_default()
}

/// Tabulates a metrics log as CSV, rows ordered by round. Returns the row
/// count written (excluding the header).
pub fn write_plot_csv(records: &[MetricsRecord], out: &Path) -> Result<usize> {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by_key(|r| r.round);
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "round,test_accuracy,test_loss,delta_tau,epsilon,bandwidth_gain")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.round,
            csv_opt(r.test_accuracy),
            csv_opt(r.test_loss),
            csv_f64(r.delta_tau),
            csv_f64(r.epsilon_spent),
            csv_f64(r.bandwidth_gain),
        )?;
    }
    w.flush()?;
    Ok(rows.len())
}
