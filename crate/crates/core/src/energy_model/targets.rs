use eta_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the pixel tile behind each energy cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub tile_h: usize,
    pub tile_w: usize,
}

impl TileGeometry {
    pub fn square(side: usize) -> Self {
        Self { tile_h: side, tile_w: side }
    }

    pub fn grid_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.tile_h == 0 || self.tile_w == 0 || h % self.tile_h != 0 || w % self.tile_w != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} is not tiled by {}x{} patches; pad to {}x{}",
                self.tile_h,
                self.tile_w,
                h.div_ceil(self.tile_h.max(1)).max(1) * self.tile_h,
                w.div_ceil(self.tile_w.max(1)).max(1) * self.tile_w
            )));
        }
        Ok((h / self.tile_h, w / self.tile_w))
    }

    /// Pixel rows and columns `[r0, r1) x [c0, c1)` covered by cell `(i, j)`.
    pub fn tile_bounds(&self, i: usize, j: usize) -> ((usize, usize), (usize, usize)) {
        (
            (i * self.tile_h, (i + 1) * self.tile_h),
            (j * self.tile_w, (j + 1) * self.tile_w),
        )
    }
}

/// Per-tile squared error for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDelta {
    pub rows: usize,
    pub cols: usize,
    /// Mean squared error per cell in m², row-major; 0 for unsupervised cells.
    pub delta: Vec<f64>,
    /// Cells containing at least one valid ground-truth pixel.
    pub supervised: Vec<bool>,
}

/// Tile-wise MSE between `pred` and `gt` over valid pixels, for an `h x w`
/// map stored row-major.
pub fn patch_mse<T: Scalar>(
    pred: &[T],
    gt: &[T],
    mask: &[T],
    h: usize,
    w: usize,
    tiles: TileGeometry,
) -> Result<PatchDelta> {
    if pred.len() != h * w || gt.len() != h * w || mask.len() != h * w {
        return Err(Error::invalid(format!(
            "patch_mse expects {h}x{w} maps, got lengths {}, {}, {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (rows, cols) = tiles.grid_dims(h, w)?;
    let mut sum = vec![0.0f64; rows * cols];
    let mut cnt = vec![0usize; rows * cols];
    for y in 0..h {
        let cy = y / tiles.tile_h;
        for x in 0..w {
            let p = y * w + x;
            if mask[p] > T::zero() {
                let cell = cy * cols + x / tiles.tile_w;
                let r = pred[p].to_f64().unwrap() - gt[p].to_f64().unwrap();
                sum[cell] += r * r;
                cnt[cell] += 1;
            }
        }
    }
    let delta = sum.iter().zip(&cnt).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    Ok(PatchDelta { rows, cols, delta, supervised: cnt.iter().map(|&c| c > 0).collect() })
}

/// `y = 1 - exp(-delta / tau)` element-wise.
pub fn map_to_energy(delta: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive and finite, got {tau}")));
    }
    if let Some(d) = delta.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::invalid(format!("patch error must be non-negative, got {d}")));
    }
    Ok(delta.iter().map(|&d| -(-d / tau).exp_m1()).collect())
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the population at or below it.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty population"));
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::invalid(format!("percentile must be in (0, 100), got {p}")));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// Temperature that maps the `p`-th percentile of `deltas` to energy 0.5.
pub fn tau_from_deltas(deltas: &[f64], p: f64) -> Result<f64> {
    let d = percentile(deltas, p)?;
    if !(d > 0.0) {
        return Err(Error::invalid(format!(
            "percentile {p} of the patch errors is {d}; temperature would not be positive"
        )));
    }
    Ok(d / std::f64::consts::LN_2)
}

/// Target energies and cell weights shaped `[1, 1, rows, cols]`.
pub(crate) fn target_tensors<T: Scalar>(d: &PatchDelta, tau: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let y = map_to_energy(&d.delta, tau)?;
    let shape = [1, 1, d.rows, d.cols];
    Ok((
        Tensor::from_vec(&shape, y.into_iter().map(T::lit).collect()),
        Tensor::from_vec(&shape, d.supervised.iter().map(|&s| if s { T::one() } else { T::zero() }).collect()),
    ))
}
