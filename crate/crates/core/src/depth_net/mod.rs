//! Dual-branch depth completion network with an optional residual
//! adaptation module.

mod arch;
mod checkpoint;
mod model;
mod train;


pub use arch::DepthArch;
pub use checkpoint::DEPTH_CHECKPOINT_KIND;
pub use model::{
    build_model, BatchStats, DepthModel, Forward, ForwardOpts, NormMode, NormState, Partition, NORM_MOMENTUM,
};
pub use train::{supervised_loss, train_supervised, EpochLoss, TrainConfig, TrainOutcome};
