use eta_tensor::{Graph, Scalar, Tensor, Var};

use crate::depth_net::DepthModel;
use crate::energy_model::{masked_sparse, EnergyModel};
use crate::error::{Error, Result};

/// Edge-aware weights `exp(-mean_c |dI|)` for horizontal and vertical
/// forward differences of an `[N,3,H,W]` image, each `[N,1,H,W]`. The last
/// column (row) has no forward neighbour and gets weight 1; its difference
/// is defined as zero anyway.
pub fn edge_weights<T: Scalar>(image: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = image.dims4();
    let d = image.data();
    let inv_c = T::lit(1.0 / c as f64);
    let mut wx = vec![T::one(); n * h * w];
    let mut wy = vec![T::one(); n * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let o = (b * h + y) * w + x;
                let mut gx = T::zero();
                let mut gy = T::zero();
                for ch in 0..c {
                    let base = ((b * c + ch) * h + y) * w + x;
                    if x + 1 < w {
                        gx = gx + (d[base + 1] - d[base]).abs();
                    }
                    if y + 1 < h {
                        gy = gy + (d[base + w] - d[base]).abs();
                    }
                }
                if x + 1 < w {
                    wx[o] = (-(gx * inv_c)).exp();
                }
                if y + 1 < h {
                    wy[o] = (-(gy * inv_c)).exp();
                }
            }
        }
    }
    (Tensor::from_vec(&[n, 1, h, w], wx), Tensor::from_vec(&[n, 1, h, w], wy))
}

/// Frames in the batch without any valid sparse point.
pub fn frames_without_anchors<T: Scalar>(mask: &Tensor<T>) -> Vec<usize> {
    let (n, _, h, w) = mask.dims4();
    (0..n).filter(|&b| mask.data()[b * h * w..(b + 1) * h * w].iter().all(|&m| m <= T::zero())).collect()
}

/// `-mean log(1 - min(e, clamp))` over the energy grid of `pred`.
pub fn energy_term<T: Scalar>(
    g: &mut Graph<T>,
    energy: &EnergyModel<T>,
    pred: Var,
    sparse_masked: &Tensor<T>,
    clamp: f64,
) -> Result<Var> {
    let s = g.constant(sparse_masked.clone());
    let f = energy.forward(g, pred, s, false)?;
    Ok(g.energy_loss(f.energy, clamp))
}

/// Mean `|pred - z|` over valid sparse points.
pub fn sparse_term<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    sparse: &Tensor<T>,
    mask: &Tensor<T>,
    frame_ids: &[String],
) -> Result<Var> {
    if let Some(&b) = frames_without_anchors(mask).first() {
        return Err(Error::NoAnchors(frame_ids.get(b).cloned().unwrap_or_else(|| format!("#{b}"))));
    }
    Ok(g.masked_l1(pred, sparse, mask))
}

/// Edge-aware L1 penalty on forward differences of `pred`.
pub fn smooth_term<T: Scalar>(g: &mut Graph<T>, pred: Var, image: &Tensor<T>) -> Var {
    let (wx, wy) = edge_weights(image);
    g.edge_smoothness(pred, &wx, &wy)
}

fn eval(f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>, pred: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = f(&mut g, p)?;
    Ok(g.value(l).item())
}

/// Energy loss of `pred` [N,1,H,W]; `producer` must be the depth model the
/// energy network was trained against.
pub fn loss_energy(
    energy: &EnergyModel<f64>,
    producer: &DepthModel<f64>,
    pred: &Tensor<f64>,
    sparse: &Tensor<f64>,
    mask: &Tensor<f64>,
    clamp: f64,
) -> Result<f64> {
    energy.check_binding(producer)?;
    let zs = masked_sparse(sparse, mask);
    eval(|g, p| energy_term(g, energy, p, &zs, clamp), pred)
}

pub fn loss_sparse(pred: &Tensor<f64>, sparse: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let ids: Vec<String> = (0..pred.shape()[0]).map(|i| format!("#{i}")).collect();
    eval(|g, p| sparse_term(g, p, sparse, mask, &ids), pred)
}

pub fn loss_smooth(pred: &Tensor<f64>, image: &Tensor<f64>) -> Result<f64> {
    let (n, _, h, w) = pred.dims4();
    if image.shape() != [n, 3, h, w] {
        return Err(Error::invalid(format!(
            "image {:?} does not match prediction {:?}",
            image.shape(),
            pred.shape()
        )));
    }
    eval(|g, p| Ok(smooth_term(g, p, image)), pred)
}
