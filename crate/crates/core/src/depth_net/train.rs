use eta_tensor::{Adam, Graph, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DepthModel, ForwardOpts, NormMode, NORM_MOMENTUM};
use crate::data_synth::{Batch, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the samples held out for checkpoint selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, learning_rate: 2e-3, validation_fraction: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean supervised loss over the epoch's batches, in meters.
    pub train: f64,
    /// Mean absolute error on the held-out split.
    pub val: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Snapshot with the lowest validation loss.
    pub model: DepthModel<T>,
    pub best_epoch: usize,
    pub curve: Vec<EpochLoss>,
}

/// Masked mean absolute error between prediction and ground truth, in
/// running-statistics mode.
pub fn supervised_loss<T: Scalar>(model: &DepthModel<T>, samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut frozen = model.clone();
    frozen.norm.mode = NormMode::Frozen;
    for chunk in samples.chunks(8) {
        let b: Batch<T> = Batch::from_samples(chunk)?;
        let (gt, gm) = gt_of(&b)?;
        let mut g = Graph::new();
        let (i, z, m) = (g.constant(b.image.clone()), g.constant(b.sparse.clone()), g.constant(b.sparse_mask.clone()));
        let f = frozen.forward(&mut g, i, z, m, ForwardOpts::inference(NormMode::Frozen))?;
        let l = g.masked_l1(f.depth, gt, gm);
        total += g.value(l).item().to_f64().unwrap() * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

fn gt_of<T>(b: &Batch<T>) -> Result<(&eta_tensor::Tensor<T>, &eta_tensor::Tensor<T>)> {
    match (&b.gt, &b.gt_mask) {
        (Some(g), Some(m)) => Ok((g, m)),
        _ => Err(Error::invalid(format!(
            "supervised training needs ground truth for every sample (batch starting at `{}`)",
            b.frame_ids[0]
        ))),
    }
}

/// Minimizes masked L1 against ground truth with Adam over all source
/// weights. Running normalization statistics are updated from every batch.
pub fn train_supervised<T: Scalar>(
    mut model: DepthModel<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::invalid("training needs at least 2 samples (one is held out)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let val: Vec<&Sample> = order[..n_val].iter().map(|&i| &samples[i]).collect();
    let mut train: Vec<usize> = order[n_val..].to_vec();

    let mut opt = Adam::new(cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DepthModel<T>)> = None;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for idx in train.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let b: Batch<T> = Batch::from_samples(&refs)?;
            let (gt, gm) = gt_of(&b)?;
            let mut g = Graph::new();
            let (i, z, m) = (g.constant(b.image.clone()), g.constant(b.sparse.clone()), g.constant(b.sparse_mask.clone()));
            let opts = ForwardOpts { norm: NormMode::Batch, grad_theta: true, grad_psi: false };
            let f = model.forward(&mut g, i, z, m, opts)?;
            let loss = g.masked_l1(f.depth, gt, gm);
            let lv = g.value(loss).item().to_f64().unwrap();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("supervised loss at epoch {epoch}")));
            }
            let grads = g.backward(loss);
            let gr: Vec<_> = f.theta.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut model.theta.tensors_mut(), &gr);
            model.norm.commit(&f.batch_stats, NORM_MOMENTUM);
            sum += lv;
            batches += 1;
        }
        let train_loss = sum / batches.max(1) as f64;
        let val_loss = supervised_loss(&model, &val)?;
        curve.push(EpochLoss { epoch, train: train_loss, val: val_loss });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, mut model) = best.expect("at least one epoch");
    model.norm.mode = NormMode::Frozen;
    model.train_seed = Some(cfg.seed);
    Ok(TrainOutcome { model, best_epoch, curve })
}
