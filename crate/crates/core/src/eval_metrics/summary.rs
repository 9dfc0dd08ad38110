use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::metrics::{MetricRecord, Phase};
use crate::error::{Error, Result};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median with the two middle values averaged for even counts.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    /// One row per (run_id, phase).
    RunPhase,
    /// One row per phase across all runs.
    Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub run_id: String,
    pub phase: Phase,
    pub n_records: usize,
    pub mae_mean: f64,
    pub mae_median: f64,
    pub rmse_mean: f64,
    pub rmse_median: f64,
}

/// Aggregates in a deterministic order (sorted by group key).
pub fn summarize(records: &[MetricRecord], group_by: GroupBy) -> Result<Vec<Summary>> {
    if records.is_empty() {
        return Err(Error::invalid("nothing to summarize"));
    }
    let mut groups: BTreeMap<(String, Phase), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = match group_by {
            GroupBy::RunPhase => (r.run_id.clone(), r.phase),
            GroupBy::Phase => ("*".to_string(), r.phase),
        };
        let e = groups.entry(key).or_default();
        e.0.push(r.mae_m);
        e.1.push(r.rmse_m);
    }
    Ok(groups
        .into_iter()
        .map(|((run_id, phase), (m, r))| Summary {
            run_id,
            phase,
            n_records: m.len(),
            mae_mean: mean(&m),
            mae_median: median(&m),
            rmse_mean: mean(&r),
            rmse_median: median(&r),
        })
        .collect())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format { path: path.to_path_buf(), message: e.to_string() }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        if !(r.rmse_m >= r.mae_m && r.mae_m >= 0.0) {
            return Err(Error::invalid(format!(
                "metric record {}/{} violates rmse >= mae >= 0 ({} vs {})",
                r.run_id, r.frame_id, r.rmse_m, r.mae_m
            )));
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["run_id", "frame_id", "phase", "mae_m", "rmse_m", "n_pixels"]).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([r.run_id.clone(), r.frame_id.clone(), r.phase.to_string(), fmt(r.mae_m), fmt(r.rmse_m), r.n_pixels.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let bytes = crate::archive::read_artifact(path)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| Error::Format { path: path.to_path_buf(), message: format!("bad {what} in row {row:?}") };
        if row.len() != 6 {
            return Err(bad("column count"));
        }
        out.push(MetricRecord {
            run_id: row[0].to_string(),
            frame_id: row[1].to_string(),
            phase: row[2].parse().map_err(|_| bad("phase"))?,
            mae_m: row[3].parse().map_err(|_| bad("mae_m"))?,
            rmse_m: row[4].parse().map_err(|_| bad("rmse_m"))?,
            n_pixels: row[5].parse().map_err(|_| bad("n_pixels"))?,
        });
    }
    Ok(out)
}

pub fn write_summary_csv(path: &Path, rows: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["run_id", "phase", "n_records", "mae_mean", "mae_median", "rmse_mean", "rmse_median"])
        .map_err(|e| csv_err(path, e))?;
    for s in rows {
        w.write_record([
            s.run_id.clone(),
            s.phase.to_string(),
            s.n_records.to_string(),
            fmt(s.mae_mean),
            fmt(s.mae_median),
            fmt(s.rmse_mean),
            fmt(s.rmse_median),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
