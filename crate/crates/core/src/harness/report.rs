//! File reporting: summary CSV/JSON, per-replicate records, plot data.
//!
//! CSV floats go through the csv crate's shortest-round-trip formatting,
//! so parsing `summary.csv` reproduces the rows bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::EstimatorId;
use crate::harness::mc::{McRow, McSummary};

/// Files written by [`report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub summary_csv: PathBuf,
    pub summary_json: PathBuf,
    pub replicates_csv: PathBuf,
    pub failures_csv: PathBuf,
    pub plot_data_csv: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ReplicateCsvRow {
    kind: EstimatorId,
    n: usize,
    replicate: usize,
    stream: u64,
    param: String,
    value: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PlotCsvRow {
    label: Option<u8>,
    kind: EstimatorId,
    n: usize,
    param: String,
    mean: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
}

/// Write `summary.csv`, `summary.json`, `replicates.csv`, `failures.csv`
/// and `plot_data.csv` under `out_dir`.
pub fn report(summary: &McSummary, out_dir: &Path) -> Result<ReportPaths> {
    fs::create_dir_all(out_dir)?;
    let paths = ReportPaths {
        summary_csv: out_dir.join("summary.csv"),
        summary_json: out_dir.join("summary.json"),
        replicates_csv: out_dir.join("replicates.csv"),
        failures_csv: out_dir.join("failures.csv"),
        plot_data_csv: out_dir.join("plot_data.csv"),
    };

    let mut w = csv::Writer::from_path(&paths.summary_csv)?;
    for row in &summary.rows {
        w.serialize(row)?;
    }
    w.flush()?;

    // full config rides along for provenance
    let json = serde_json::json!({
        "config": summary.config,
        "rows": summary.rows,
    });
    fs::write(&paths.summary_json, serde_json::to_string_pretty(&json)?)?;

    let mut w = csv::Writer::from_path(&paths.replicates_csv)?;
    for rec in summary.replicates.iter().filter(|r| r.error.is_none()) {
        for pe in &rec.estimates {
            w.serialize(ReplicateCsvRow {
                kind: rec.estimator,
                n: rec.n,
                replicate: rec.replicate,
                stream: rec.stream,
                param: pe.param.clone(),
                value: pe.value,
                ci_lo: pe.ci.map(|c| c.0),
                ci_hi: pe.ci.map(|c| c.1),
            })?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.failures_csv)?;
    // the csv crate skips headers when no record is written; keep the
    // file self-describing even when every replicate succeeded
    w.write_record(["kind", "n", "replicate", "stream", "error"])?;
    for rec in summary.replicates.iter() {
        if let Some(err) = &rec.error {
            w.write_record([
                rec.estimator.name().to_string(),
                rec.n.to_string(),
                rec.replicate.to_string(),
                rec.stream.to_string(),
                err.clone(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.plot_data_csv)?;
    for row in &summary.rows {
        let half = row.ci_halfwidth;
        let (lo, hi) = if half.is_finite() {
            (Some(row.mean - half), Some(row.mean + half))
        } else {
            (None, None)
        };
        w.serialize(PlotCsvRow {
            label: row.kind.plot_label(),
            kind: row.kind,
            n: row.n,
            param: row.param.clone(),
            mean: row.mean,
            ci_lo: lo,
            ci_hi: hi,
        })?;
    }
    w.flush()?;

    Ok(paths)
}

/// Parse a `summary.csv` back into rows (exact inverse of [`report`]).
pub fn read_summary_csv(path: &Path) -> Result<Vec<McRow>> {
    let mut rows = Vec::new();
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
