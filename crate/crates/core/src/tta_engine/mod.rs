//! Test-time adaptation: loss terms, per-batch updates of the adaptation
//! module and single-pass streaming.

mod adapter;
mod config;
mod losses;
mod stream;

#[cfg(test)]
mod tests;

pub use adapter::{adapt_step, baseline_step, Adapter, Evaluation, IterLoss, LossTerms, StepOutcome};
pub use config::{AdaptConfig, NormPolicy, OptimizerStatePolicy, DEFAULT_ENERGY_CLAMP, EMA_RATE};
pub use losses::{edge_weights, energy_term, loss_energy, loss_smooth, loss_sparse, smooth_term, sparse_term};
pub use stream::{run_stream, AdaptReport, FrameResult, LossRecord, RecordKind, StreamOutcome};
