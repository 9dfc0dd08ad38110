use eta_tensor::{kaiming_normal, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::targets::TileGeometry;
use crate::depth_net::DepthModel;
use crate::error::{Error, Result};

pub const MAX_STAGES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyArch {
    /// Output channels of each stride-2 5x5 stage; its length is `k`.
    pub widths: Vec<usize>,
    /// Average the logit map to a single cell.
    pub global_pool: bool,
    pub leaky_slope: f64,
    /// Both input channels are divided by this (meters).
    pub depth_scale: f64,
    pub seed: u64,
}

impl Default for EnergyArch {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128, 256, 512],
            global_pool: false,
            leaky_slope: 0.2,
            depth_scale: 10.0,
            seed: 0,
        }
    }
}

impl EnergyArch {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STAGES).contains(&self.stages()) {
            return Err(Error::invalid(format!(
                "energy model needs 1..={MAX_STAGES} downsampling stages, got {}",
                self.stages()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("energy model widths must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope must be in [0, 1)"));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::invalid("depth_scale must be positive"));
        }
        Ok(())
    }

    /// Tiles for an `h x w` input: `2^k` squares, or the whole image when
    /// globally pooled.
    pub fn tiles(&self, h: usize, w: usize) -> Result<TileGeometry> {
        let f = 1usize << self.stages();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "energy input {h}x{w} is not divisible by 2^{} = {f}; pad to {}x{}",
                self.stages(),
                h.div_ceil(f).max(1) * f,
                w.div_ceil(f).max(1) * f
            )));
        }
        Ok(if self.global_pool { TileGeometry { tile_h: h, tile_w: w } } else { TileGeometry::square(f) })
    }
}

#[derive(Clone, Debug)]
pub struct EnergyModel<T> {
    pub arch: EnergyArch,
    pub phi: ParamStore<T>,
    pub tau: f64,
    /// Fingerprint of the depth model the energies were trained against.
    pub bound_to: String,
}

/// Energy map for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, each in (0, 1).
    pub values: Vec<f64>,
    pub tiles: TileGeometry,
}

impl EnergyGrid {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

pub struct EnergyForward {
    /// Sigmoid energies `[N, 1, rows, cols]`.
    pub energy: Var,
    /// Pre-sigmoid values with the same shape.
    pub logits: Var,
    pub phi: Vec<Var>,
}

/// Invalid sparse entries are forced to zero before they reach the network.
pub fn masked_sparse<T: Scalar>(sparse: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let data = sparse.data().iter().zip(mask.data()).map(|(&z, &m)| if m > T::zero() { z } else { T::zero() }).collect();
    Tensor::from_vec(sparse.shape(), data)
}

impl<T: Scalar> EnergyModel<T> {
    /// Untrained model; `tau` starts at 1 and is normally replaced by
    /// calibration.
    pub fn new(arch: &EnergyArch, bound_to: &DepthModel<T>) -> Result<Self> {
        let mut m = Self::skeleton(arch)?;
        m.bound_to = bound_to.fingerprint();
        Ok(m)
    }

    pub(crate) fn skeleton(arch: &EnergyArch) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let gain = (2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope)).sqrt();
        let mut phi = ParamStore::new();
        let mut c = 2;
        for (i, &w) in arch.widths.iter().enumerate() {
            phi.push(format!("stage{i}.w"), kaiming_normal(&[w, c, 5, 5], gain, &mut rng));
            phi.push(format!("stage{i}.b"), Tensor::zeros(&[w]));
            c = w;
        }
        phi.push("out.w", kaiming_normal(&[1, c, 3, 3], 1.0, &mut rng));
        phi.push("out.b", Tensor::zeros(&[1]));
        Ok(Self { arch: arch.clone(), phi, tau: 1.0, bound_to: String::new() })
    }

    pub fn k(&self) -> usize {
        self.arch.stages()
    }

    /// Fails unless this model was trained against `depth`.
    pub fn check_binding(&self, depth: &DepthModel<T>) -> Result<()> {
        let fp = depth.fingerprint();
        if fp != self.bound_to {
            return Err(Error::FingerprintMismatch { expected: self.bound_to.clone(), found: fp });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EnergyModel<U> {
        EnergyModel { arch: self.arch.clone(), phi: self.phi.cast(), tau: self.tau, bound_to: self.bound_to.clone() }
    }

    /// Builds the network into `g`. `sparse` must already have invalid
    /// entries zeroed (see [`masked_sparse`]).
    pub fn forward(&self, g: &mut Graph<T>, pred: Var, sparse: Var, grad_phi: bool) -> Result<EnergyForward> {
        let (n, c, h, w) = g.value(pred).dims4();
        if c != 1 || g.value(sparse).shape() != [n, 1, h, w] {
            return Err(Error::invalid(format!(
                "energy input must be two [N,1,H,W] maps, got {:?} and {:?}",
                g.value(pred).shape(),
                g.value(sparse).shape()
            )));
        }
        self.arch.tiles(h, w)?;
        let phi: Vec<Var> = self.phi.tensors().iter().map(|t| g.leaf(t.clone(), grad_phi)).collect();
        let inv = T::lit(1.0 / self.arch.depth_scale);
        let a = g.affine(pred, inv, T::zero());
        let b = g.affine(sparse, inv, T::zero());
        let mut x = g.concat(&[a, b]);
        for i in 0..self.k() {
            x = g.conv2d(x, phi[2 * i], Some(phi[2 * i + 1]), 2, 2);
            x = g.leaky_relu(x, self.arch.leaky_slope);
        }
        let k = self.k();
        let mut logits = g.conv2d(x, phi[2 * k], Some(phi[2 * k + 1]), 1, 1);
        if self.arch.global_pool {
            logits = g.spatial_mean(logits);
        }
        let energy = g.sigmoid(logits);
        Ok(EnergyForward { energy, logits, phi })
    }

    /// Energy grids for a batch of predictions `[N,1,H,W]`.
    pub fn grids(&self, pred: &Tensor<T>, sparse: &Tensor<T>, mask: &Tensor<T>) -> Result<Vec<EnergyGrid>> {
        let (n, _, h, w) = pred.dims4();
        let tiles = self.arch.tiles(h, w)?;
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let s = g.constant(masked_sparse(sparse, mask));
        let f = self.forward(&mut g, p, s, false)?;
        let e = g.value(f.energy);
        let (_, _, rows, cols) = e.dims4();
        Ok((0..n)
            .map(|i| EnergyGrid {
                rows,
                cols,
                values: e.data()[i * rows * cols..(i + 1) * rows * cols].iter().map(|v| v.to_f64().unwrap()).collect(),
                tiles,
            })
            .collect())
    }
}

/// Energy grid for a single prediction `[1,1,H,W]`.
pub fn energy_forward<T: Scalar>(
    model: &EnergyModel<T>,
    pred: &Tensor<T>,
    sparse: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<EnergyGrid> {
    if pred.shape().len() != 4 || pred.shape()[0] != 1 {
        return Err(Error::invalid(format!("energy_forward takes one frame, got {:?}", pred.shape())));
    }
    Ok(model.grids(pred, sparse, mask)?.remove(0))
}
