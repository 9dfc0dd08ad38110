//! Configuration and end-to-end experiment pipeline.

mod config;
mod pipeline;
mod rundir;

pub use config::{resolve_config, DataConfig, ExperimentConfig, RunConfig, Scenario, ShiftStep};
pub use pipeline::{
    adapt_plan, adapt_run, discrimination_auroc, run_id, snapshots, source_run_info, EnergyChoice, PlannedRun, evaluate_outcome, evaluate_outcome_frames, evaluate_predictions, frame_seed, iters_method, run_experiment,
    source_predictions, synth_source, synth_stream, train_depth, train_energy_from_pairs, EnergySummary,
    ExperimentResult, RunResult, SourceData, METHOD_BASELINE, METHOD_ETA, METHOD_GLOBAL, METHOD_SOURCE,
};
pub use rundir::{
    RunDir, ADAPT_DIR, CONFIG_FILE, DEPTH_FILE, ENERGY_GLOBAL_FILE, ENERGY_LOCAL_FILE, RUN_FILE, TRAINING_FILE,
};

#[cfg(test)]
mod tests;
