//! Depth error metrics, aggregation and report files.

mod metrics;
mod plot;
mod report;
mod summary;


pub use metrics::{evaluate_frame, mae, rmse, Crop, EvalConfig, MetricRecord, Phase};
pub use report::{
    emit_report, write_energy_snapshots, write_runs, RunInfo, ENERGY_DIR, METRICS_FILE, REPORT_DIR, RUNS_FILE,
    SWEEP_GRID, SWEEP_ITERATIONS,
};
pub use summary::{mean, median, read_metrics_csv, summarize, write_metrics_csv, write_summary_csv, GroupBy, Summary};

/// Area under the ROC curve for scores where `positive` should rank higher:
/// the probability that a random positive outscores a random negative, with
/// ties counted half.
pub fn auroc(scores: &[(f64, bool)]) -> crate::Result<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(crate::Error::invalid("AUROC needs both positive and negative examples"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}
