use std::cmp::Ordering;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::DepthMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseStrategy {
    Uniform,
    /// Largest depth-gradient magnitude first; a corner-detector stand-in.
    GradientTopk,
}

impl FromStr for SparseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "gradient_topk" => Ok(Self::GradientTopk),
            other => Err(Error::invalid(format!("unknown sparse strategy `{other}`"))),
        }
    }
}

/// Forward-difference gradient magnitude of a depth map; the last
/// column/row contributes a zero difference.
pub fn depth_gradient_magnitude(values: &[f32], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let gx = if x + 1 < width { (values[p + 1] - values[p]) as f64 } else { 0.0 };
            let gy = if y + 1 < height { (values[p + width] - values[p]) as f64 } else { 0.0 };
            out[p] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Seeded random ranks used to break ties between equal gradient magnitudes.
pub fn tie_break_ranks(n: usize, seed: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7ac3_5eed));
    let mut rank = vec![0u32; n];
    for (r, &p) in order.iter().enumerate() {
        rank[p as usize] = r as u32;
    }
    rank
}

/// Simulates sparse measurements by copying `n_points` dense depths.
pub fn sample_sparse(
    dense: &DepthMap,
    height: usize,
    width: usize,
    n_points: usize,
    strategy: SparseStrategy,
    seed: u64,
) -> Result<DepthMap> {
    let n = height * width;
    if dense.values.len() != n || dense.mask.len() != n {
        return Err(Error::invalid("dense map size does not match geometry"));
    }
    if !dense.fully_valid() {
        return Err(Error::invalid("sparse sampling requires a fully valid dense map"));
    }
    let k = n_points.min(n);
    let chosen: Vec<usize> = match strategy {
        SparseStrategy::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
        SparseStrategy::GradientTopk => {
            let mag = depth_gradient_magnitude(&dense.values, height, width);
            let rank = tie_break_ranks(n, seed);
            let mut idx: Vec<usize> = (0..n).collect();
            let cmp = |a: &usize, b: &usize| -> Ordering {
                mag[*b]
                    .partial_cmp(&mag[*a])
                    .unwrap_or(Ordering::Equal)
                    .then(rank[*a].cmp(&rank[*b]))
            };
            if k > 0 && k < n {
                idx.select_nth_unstable_by(k - 1, cmp);
            }
            idx.truncate(k);
            idx
        }
    };
    let mut out = DepthMap::empty(n);
    for p in chosen {
        out.values[p] = dense.values[p];
        out.mask[p] = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::generate_scene;

    fn dense() -> (DepthMap, usize, usize) {
        let s = generate_scene(11, (64, 64), (1.0, 10.0)).unwrap();
        (s.gt.unwrap(), 64, 64)
    }

    #[test]
    fn zero_points_is_empty() {
        let (d, h, w) = dense();
        let s = sample_sparse(&d, h, w, 0, SparseStrategy::Uniform, 1).unwrap();
        assert_eq!(s.valid_count(), 0);
        assert!(s.values.iter().all(|&v| v == 0.0));
        let s = sample_sparse(&d, h, w, 0, SparseStrategy::GradientTopk, 1).unwrap();
        assert_eq!(s.valid_count(), 0);
    }

    #[test]
    fn saturation_copies_everything() {
        let (d, h, w) = dense();
        for strategy in [SparseStrategy::Uniform, SparseStrategy::GradientTopk] {
            let s = sample_sparse(&d, h, w, h * w + 10, strategy, 1).unwrap();
            assert!(s.fully_valid());
            assert_eq!(s.values, d.values);
        }
    }

    #[test]
    fn exact_count_and_values_copied() {
        let (d, h, w) = dense();
        let s = sample_sparse(&d, h, w, 300, SparseStrategy::Uniform, 5).unwrap();
        assert_eq!(s.valid_count(), 300);
        for p in 0..h * w {
            if s.mask[p] {
                assert_eq!(s.values[p], d.values[p]);
            }
        }
    }

    #[test]
    fn gradient_topk_matches_exhaustive_sort() {
        let (d, h, w) = dense();
        // Oracle: full sort on (magnitude desc, tie rank asc), recomputing
        // magnitudes independently.
        let mut mag = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let gx = if x + 1 < w { d.values[p + 1] as f64 - d.values[p] as f64 } else { 0.0 };
                let gy = if y + 1 < h { d.values[p + w] as f64 - d.values[p] as f64 } else { 0.0 };
                mag[p] = (gx * gx + gy * gy).sqrt();
            }
        }
        let rank = tie_break_ranks(h * w, 9);
        let mut all: Vec<usize> = (0..h * w).collect();
        all.sort_by(|&a, &b| mag[b].partial_cmp(&mag[a]).unwrap().then(rank[a].cmp(&rank[b])));
        for k in [1, 17, 1500, 4000] {
            let s = sample_sparse(&d, h, w, k, SparseStrategy::GradientTopk, 9).unwrap();
            let mut want = all[..k].to_vec();
            want.sort();
            let got: Vec<usize> = (0..h * w).filter(|&p| s.mask[p]).collect();
            assert_eq!(got, want, "k = {k}");
        }
    }

    #[test]
    fn rejects_partial_dense() {
        let (mut d, h, w) = dense();
        d.mask[3] = false;
        assert!(sample_sparse(&d, h, w, 10, SparseStrategy::Uniform, 0).is_err());
    }
}
