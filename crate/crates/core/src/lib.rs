//! Energy-based test-time adaptation for depth completion, at desk scale.

pub mod archive;
pub mod data_synth;
pub mod depth_net;
pub mod energy_model;
pub mod eval_metrics;
pub mod experiment;
pub mod tta_engine;
mod error;

pub use error::{Error, Result};
