use eta_tensor::{Adam, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{masked_sparse, EnergyModel};
use super::perturb::{fgsm_perturb, PerturbConfig};
use super::targets::{patch_mse, target_tensors, tau_from_deltas, PatchDelta, TileGeometry};
use crate::data_synth::{Batch, Sample};
use crate::depth_net::{DepthModel, NormMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Percentile of clean patch errors that maps to energy 0.5.
    pub tau_percentile: f64,
    pub seed: u64,
}

impl Default for EnergyTrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, learning_rate: 1e-3, tau_percentile: 90.0, seed: 0 }
    }
}

impl EnergyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.tau_percentile > 0.0 && self.tau_percentile < 100.0) {
            return Err(Error::invalid("tau_percentile must be in (0, 100)"));
        }
        Ok(())
    }
}

/// One frame's prediction with the energies it should receive.
#[derive(Clone, Debug)]
pub struct EnergyExample<T> {
    pub frame_id: String,
    pub perturbed: bool,
    /// `[1,1,H,W]` depth prediction.
    pub pred: Tensor<T>,
    /// `[1,1,H,W]` sparse depth with invalid entries zeroed.
    pub sparse: Tensor<T>,
    /// `[1,1,rows,cols]` Gibbs targets and cell weights (0 = unsupervised).
    pub target: Tensor<T>,
    pub weight: Tensor<T>,
    pub delta: PatchDelta,
}

/// Clean and adversarial predictions for a set of samples, before targets
/// are attached. Both share the clean sparse depth as conditioning.
#[derive(Clone, Debug)]
pub struct PredictionPair<T> {
    pub frame_id: String,
    pub clean: Tensor<T>,
    pub perturbed: Tensor<T>,
    pub sparse: Tensor<T>,
    pub gt: Tensor<T>,
    pub gt_mask: Tensor<T>,
}

fn frozen<T: Scalar>(model: &DepthModel<T>) -> DepthModel<T> {
    let mut m = model.clone();
    m.norm.mode = NormMode::Frozen;
    m
}

/// Runs the depth model on each sample, clean and after one FGSM step.
pub fn predict_pairs<T: Scalar>(
    depth: &DepthModel<T>,
    samples: &[Sample],
    cfg: &PerturbConfig,
    chunk: usize,
) -> Result<Vec<PredictionPair<T>>> {
    let model = frozen(depth);
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&Sample> = part.iter().collect();
        let b: Batch<T> = Batch::from_samples(&refs)?;
        let clean = model.predict(&b.image, &b.sparse, &b.sparse_mask)?;
        let adv = fgsm_perturb(&model, &b, cfg)?;
        let pert = model.predict(&adv.image, &adv.sparse, &b.sparse_mask)?;
        let sparse = masked_sparse(&b.sparse, &b.sparse_mask);
        let (gt, gm) = (b.gt.as_ref().unwrap(), b.gt_mask.as_ref().unwrap());
        for (i, id) in b.frame_ids.iter().enumerate() {
            out.push(PredictionPair {
                frame_id: id.clone(),
                clean: clean.batch_item(i),
                perturbed: pert.batch_item(i),
                sparse: sparse.batch_item(i),
                gt: gt.batch_item(i),
                gt_mask: gm.batch_item(i),
            });
        }
    }
    Ok(out)
}

fn delta_of<T: Scalar>(pred: &Tensor<T>, pair: &PredictionPair<T>, tiles: TileGeometry) -> Result<PatchDelta> {
    let (_, _, h, w) = pred.dims4();
    patch_mse(pred.data(), pair.gt.data(), pair.gt_mask.data(), h, w, tiles)
}

/// Clean-prediction patch errors of every supervised cell.
pub fn clean_deltas<T: Scalar>(pairs: &[PredictionPair<T>], tiles: TileGeometry) -> Result<Vec<f64>> {
    let mut all = Vec::new();
    for p in pairs {
        let d = delta_of(&p.clean, p, tiles)?;
        all.extend(d.delta.iter().zip(&d.supervised).filter(|(_, &s)| s).map(|(&v, _)| v));
    }
    Ok(all)
}

/// Temperature from clean validation predictions of `depth`.
pub fn calibrate_tau<T: Scalar>(
    depth: &DepthModel<T>,
    val: &[Sample],
    percentile: f64,
    tiles: TileGeometry,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("temperature calibration needs a non-empty validation set"));
    }
    let model = frozen(depth);
    let mut all = Vec::new();
    for part in val.chunks(8) {
        let refs: Vec<&Sample> = part.iter().collect();
        let b: Batch<T> = Batch::from_samples(&refs)?;
        let (gt, gm) = match (&b.gt, &b.gt_mask) {
            (Some(g), Some(m)) => (g, m),
            _ => return Err(Error::invalid("temperature calibration needs ground truth")),
        };
        let pred = model.predict(&b.image, &b.sparse, &b.sparse_mask)?;
        let (n, _, h, w) = pred.dims4();
        for i in 0..n {
            let (p, g, m) = (pred.batch_item(i), gt.batch_item(i), gm.batch_item(i));
            let d = patch_mse(p.data(), g.data(), m.data(), h, w, tiles)?;
            all.extend(d.delta.iter().zip(&d.supervised).filter(|(_, &s)| s).map(|(&v, _)| v));
        }
    }
    tau_from_deltas(&all, percentile)
}

/// Attaches Gibbs targets at temperature `tau` to both members of each pair.
pub fn build_examples<T: Scalar>(
    pairs: &[PredictionPair<T>],
    tiles: TileGeometry,
    tau: f64,
) -> Result<Vec<EnergyExample<T>>> {
    let mut out = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        for (pred, perturbed) in [(&p.clean, false), (&p.perturbed, true)] {
            let delta = delta_of(pred, p, tiles)?;
            let (target, weight) = target_tensors(&delta, tau)?;
            out.push(EnergyExample {
                frame_id: p.frame_id.clone(),
                perturbed,
                pred: pred.clone(),
                sparse: p.sparse.clone(),
                target,
                weight,
                delta,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    /// Cell-averaged cross entropy over all examples before the first step.
    pub initial: f64,
    /// Mean batch loss of each epoch.
    pub epochs: Vec<f64>,
}

fn stack<T: Scalar>(ex: &[&EnergyExample<T>]) -> [Tensor<T>; 4] {
    let g = |f: fn(&EnergyExample<T>) -> &Tensor<T>| Tensor::stack_batch(&ex.iter().map(|e| f(e).clone()).collect::<Vec<_>>());
    [g(|e| &e.pred), g(|e| &e.sparse), g(|e| &e.target), g(|e| &e.weight)]
}

fn batch_loss<T: Scalar>(model: &EnergyModel<T>, ex: &[&EnergyExample<T>], grad: bool) -> Result<(f64, Option<Vec<Option<Tensor<T>>>>)> {
    let [pred, sparse, target, weight] = stack(ex);
    let mut g = Graph::new();
    let p = g.constant(pred);
    let s = g.constant(sparse);
    let f = model.forward(&mut g, p, s, grad)?;
    let loss = g.bce_with_logits(f.logits, &target, &weight);
    let lv = g.value(loss).item().to_f64().unwrap();
    if !grad {
        return Ok((lv, None));
    }
    let mut grads = g.backward(loss);
    Ok((lv, Some(f.phi.iter().map(|&v| grads.take(v)).collect())))
}

/// Mean per-cell cross entropy of `model` over `examples`.
pub fn energy_loss_on<T: Scalar>(model: &EnergyModel<T>, examples: &[EnergyExample<T>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut cells = 0.0;
    for part in examples.chunks(32) {
        let refs: Vec<_> = part.iter().collect();
        let w: f64 = part.iter().map(|e| e.weight.sum().to_f64().unwrap()).sum();
        let (l, _) = batch_loss(model, &refs, false)?;
        sum += l * w;
        cells += w;
    }
    Ok(if cells > 0.0 { sum / cells } else { 0.0 })
}

/// Fits `phi` to the given examples with Adam.
pub fn fit_energy<T: Scalar>(
    model: &mut EnergyModel<T>,
    examples: &[EnergyExample<T>],
    cfg: &EnergyTrainConfig,
) -> Result<EnergyCurve> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("no energy training examples"));
    }
    let mut curve = EnergyCurve { initial: energy_loss_on(model, examples)?, epochs: Vec::with_capacity(cfg.epochs) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<_> = idx.iter().map(|&i| &examples[i]).collect();
            let (lv, grads) = batch_loss(model, &refs, true)?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("energy training loss at epoch {epoch}")));
            }
            let grads = grads.unwrap();
            let gr: Vec<_> = grads.iter().map(|g| g.as_ref()).collect();
            opt.step(&mut model.phi.tensors_mut(), &gr);
            sum += lv;
            n += 1;
        }
        curve.epochs.push(sum / n as f64);
    }
    Ok(curve)
}

#[derive(Clone, Debug)]
pub struct EnergyTrainOutcome<T> {
    pub model: EnergyModel<T>,
    pub curve: EnergyCurve,
    pub examples: usize,
}

/// Calibrates the temperature on `val`, then trains on clean and perturbed
/// predictions over `train`. The depth model is only read.
pub fn train_energy<T: Scalar>(
    mut model: EnergyModel<T>,
    depth: &DepthModel<T>,
    train: &[Sample],
    val: &[Sample],
    perturb: &PerturbConfig,
    cfg: &EnergyTrainConfig,
) -> Result<EnergyTrainOutcome<T>> {
    cfg.validate()?;
    model.check_binding(depth)?;
    let (h, w) = train
        .first()
        .map(|s| (s.height, s.width))
        .ok_or_else(|| Error::invalid("energy training set is empty"))?;
    let tiles = model.arch.tiles(h, w)?;
    model.tau = calibrate_tau(depth, val, cfg.tau_percentile, tiles)?;
    let pairs = predict_pairs(depth, train, perturb, 8)?;
    let examples = build_examples(&pairs, tiles, model.tau)?;
    let curve = fit_energy(&mut model, &examples, cfg)?;
    Ok(EnergyTrainOutcome { model, curve, examples: examples.len() })
}
