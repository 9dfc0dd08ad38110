use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{MetricRecord, Phase};
use super::plot;
use super::summary::{median, read_metrics_csv, summarize, write_summary_csv, GroupBy};
use crate::energy_model::EnergyGrid;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUNS_FILE: &str = "runs.json";
pub const ENERGY_DIR: &str = "energy";
pub const REPORT_DIR: &str = "report";

/// What distinguishes one adaptation run from another in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    /// Label shared by the seeds of one configuration, e.g. `eta`.
    pub method: String,
    /// `None` for runs without adaptation.
    pub inner_iters: Option<usize>,
    /// Energy cells per frame, `None` without the energy term.
    pub grid_cells: Option<usize>,
    pub seed: u64,
    /// Sweeps this run belongs to: `iterations`, `grid`.
    #[serde(default)]
    pub sweeps: Vec<String>,
}

pub const SWEEP_ITERATIONS: &str = "iterations";
pub const SWEEP_GRID: &str = "grid";

pub fn write_runs(run_dir: &Path, runs: &[RunInfo]) -> Result<()> {
    let path = run_dir.join(RUNS_FILE);
    let text = serde_json::to_string_pretty(runs).expect("runs serialize");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_runs(run_dir: &Path) -> Result<Vec<RunInfo>> {
    let path = run_dir.join(RUNS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path, message: e.to_string() })
}

/// One CSV per run: frame_id, phase, rows, cols, space-separated values.
pub fn write_energy_snapshots(run_dir: &Path, run_id: &str, grids: &[(String, Phase, EnergyGrid)]) -> Result<()> {
    let dir = run_dir.join(ENERGY_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{run_id}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
    let werr = |e: csv::Error| Error::Format { path: path.clone(), message: e.to_string() };
    w.write_record(["frame_id", "phase", "rows", "cols", "values"]).map_err(werr)?;
    for (id, phase, g) in grids {
        let vals: Vec<String> = g.values.iter().map(|v| format!("{v:.6}")).collect();
        w.write_record([id.clone(), phase.to_string(), g.rows.to_string(), g.cols.to_string(), vals.join(" ")])
            .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-run medians over frames, then medians over the runs sharing a key.
fn medians_by<K: Ord + Clone>(
    records: &[MetricRecord],
    runs: &[RunInfo],
    key: impl Fn(&RunInfo) -> Option<K>,
) -> BTreeMap<K, f64> {
    let mut per_key: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for r in runs {
        let Some(k) = key(r) else { continue };
        let v: Vec<f64> =
            records.iter().filter(|m| m.run_id == r.run_id && m.phase == Phase::Post).map(|m| m.mae_m).collect();
        if !v.is_empty() {
            per_key.entry(k).or_default().push(median(&v));
        }
    }
    per_key.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// Reads `metrics.csv` (plus optional `runs.json` and energy snapshots) from
/// `run_dir` and writes summary tables and charts into `run_dir/report`.
/// Returns the files written.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics_csv(&run_dir.join(METRICS_FILE))?;
    if records.is_empty() {
        return Err(Error::invalid(format!("{} has no records", run_dir.join(METRICS_FILE).display())));
    }
    let runs = read_runs(run_dir)?;
    let out = run_dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut written = Vec::new();

    let rows = summarize(&records, GroupBy::RunPhase)?;
    let p = out.join("summary.csv");
    write_summary_csv(&p, &rows)?;
    written.push(p);

    // Pre/post bars per method; runs missing from runs.json are their own
    // method.
    let mut by_method: BTreeMap<String, [Vec<f64>; 2]> = BTreeMap::new();
    for s in &rows {
        let method = runs.iter().find(|r| r.run_id == s.run_id).map_or(s.run_id.as_str(), |r| r.method.as_str());
        by_method.entry(method.to_string()).or_default()[(s.phase == Phase::Post) as usize].push(s.mae_median);
    }
    let mut csv_text = String::from("method,pre_mae_median,post_mae_median\n");
    let mut groups = Vec::new();
    for (m, [pre, post]) in &by_method {
        let (a, b) = (if pre.is_empty() { 0.0 } else { median(pre) }, if post.is_empty() { 0.0 } else { median(post) });
        csv_text += &format!("{m},{a:.6},{b:.6}\n");
        groups.push(vec![a, b]);
    }
    let p = out.join("mae_bars.csv");
    write_text(&p, &csv_text)?;
    written.push(p);
    let p = out.join("mae_bars.png");
    plot::bar_chart(&p, &groups, &[plot::PRE, plot::POST])?;
    written.push(p);

    let in_sweep = |r: &RunInfo, s: &str| r.sweeps.iter().any(|x| x == s);
    let iters = medians_by(&records, &runs, |r| r.inner_iters.filter(|_| in_sweep(r, SWEEP_ITERATIONS)));
    if !iters.is_empty() {
        let p = out.join("iterations.csv");
        let mut t = String::from("inner_iters,post_mae_median\n");
        for (k, v) in &iters {
            t += &format!("{k},{v:.6}\n");
        }
        write_text(&p, &t)?;
        written.push(p);
        let p = out.join("iterations.png");
        plot::line_chart(&p, &[(iters.values().cloned().collect(), plot::POST)])?;
        written.push(p);
    }

    let grid = medians_by(&records, &runs, |r| r.grid_cells.filter(|_| in_sweep(r, SWEEP_GRID)));
    if !grid.is_empty() {
        let p = out.join("grid_size.csv");
        let mut t = String::from("grid_cells,post_mae_median\n");
        for (k, v) in &grid {
            t += &format!("{k},{v:.6}\n");
        }
        write_text(&p, &t)?;
        written.push(p);
        let p = out.join("grid_size.png");
        plot::line_chart(&p, &[(grid.values().cloned().collect(), plot::POST)])?;
        written.push(p);
    }

    let edir = run_dir.join(ENERGY_DIR);
    if edir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&edir)
            .map_err(|e| Error::io(&edir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            let stem = f.file_stem().unwrap().to_string_lossy().to_string();
            let mut rd = csv::Reader::from_path(&f).map_err(|e| Error::Format { path: f.clone(), message: e.to_string() })?;
            for row in rd.records() {
                let row = row.map_err(|e| Error::Format { path: f.clone(), message: e.to_string() })?;
                let bad = || Error::Format { path: f.clone(), message: format!("bad energy row {row:?}") };
                let rows: usize = row.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let cols: usize = row.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let vals: Vec<f64> = row.get(4).ok_or_else(bad)?.split(' ').map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if vals.len() != rows * cols {
                    return Err(bad());
                }
                let p = out.join("heatmaps").join(&stem).join(format!("{}_{}.png", &row[0], &row[1]));
                plot::heatmap(&p, rows, cols, &vals, (128 / rows.max(cols)).max(8) as u32)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
