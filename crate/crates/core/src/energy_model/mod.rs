//! Region-wise energy network scoring (prediction, sparse depth) pairs, with
//! Gibbs targets from patch errors and adversarial out-of-distribution
//! examples.

mod checkpoint;
mod model;
mod perturb;
mod targets;
mod train;


pub use checkpoint::ENERGY_CHECKPOINT_KIND;
pub use model::{energy_forward, masked_sparse, EnergyArch, EnergyForward, EnergyGrid, EnergyModel, MAX_STAGES};
pub use perturb::{fgsm_perturb, PerturbConfig, Perturbed, SPARSE_FLOOR};
pub use targets::{map_to_energy, patch_mse, percentile, tau_from_deltas, PatchDelta, TileGeometry};
pub use train::{
    build_examples, calibrate_tau, clean_deltas, energy_loss_on, fit_energy, predict_pairs, train_energy, EnergyCurve,
    EnergyExample, EnergyTrainConfig, EnergyTrainOutcome, PredictionPair,
};
