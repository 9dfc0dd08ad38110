use eta_tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_synth::Batch;
use crate::depth_net::{DepthModel, ForwardOpts, NormMode};
use crate::error::{Error, Result};

/// Perturbed sparse depth never drops below this (meters).
pub const SPARSE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// l-infinity radius on the image, in intensity units.
    pub eps_image: f64,
    /// l-infinity radius on valid sparse depth, in meters.
    pub eps_sparse: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { eps_image: 2.0 / 255.0, eps_sparse: 0.05 }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_image", self.eps_image), ("eps_sparse", self.eps_sparse)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Perturbed<T> {
    pub image: Tensor<T>,
    pub sparse: Tensor<T>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// One signed-gradient step on image and sparse depth that increases the
/// supervised loss. Sparse depth moves only where it is valid and is kept in
/// `[SPARSE_FLOOR, depth_scale]`.
pub fn fgsm_perturb<T: Scalar>(model: &DepthModel<T>, batch: &Batch<T>, cfg: &PerturbConfig) -> Result<Perturbed<T>> {
    cfg.validate()?;
    if model.norm.mode != NormMode::Frozen {
        return Err(Error::invalid("adversarial perturbation needs a model in frozen-norm mode"));
    }
    let (gt, gm) = match (&batch.gt, &batch.gt_mask) {
        (Some(g), Some(m)) => (g, m),
        _ => {
            return Err(Error::invalid(format!(
                "perturbation needs ground truth (batch starting at `{}`)",
                batch.frame_ids.first().map(String::as_str).unwrap_or("")
            )))
        }
    };
    let mut g = Graph::new();
    let i = g.leaf(batch.image.clone(), true);
    let z = g.leaf(batch.sparse.clone(), true);
    let m = g.constant(batch.sparse_mask.clone());
    let f = model.forward(&mut g, i, z, m, ForwardOpts::inference(NormMode::Frozen))?;
    let loss = g.masked_l1(f.depth, gt, gm);
    let grads = g.backward(loss);
    let gi = grads.get_or_zeros(i, batch.image.shape());
    let gz = grads.get_or_zeros(z, batch.sparse.shape());

    let ei = T::lit(cfg.eps_image);
    let image = Tensor::from_vec(
        batch.image.shape(),
        batch
            .image
            .data()
            .iter()
            .zip(gi.data())
            .map(|(&x, &d)| (x + ei * sign(d)).max(T::zero()).min(T::one()))
            .collect(),
    );
    let ez = T::lit(cfg.eps_sparse);
    let (lo, hi) = (T::lit(SPARSE_FLOOR), T::lit(model.arch.depth_scale));
    let sparse = Tensor::from_vec(
        batch.sparse.shape(),
        batch
            .sparse
            .data()
            .iter()
            .zip(gz.data())
            .zip(batch.sparse_mask.data())
            .map(|((&v, &d), &k)| if k > T::zero() { (v + ez * sign(d)).max(lo).min(hi) } else { v })
            .collect(),
    );
    Ok(Perturbed { image, sparse })
}
