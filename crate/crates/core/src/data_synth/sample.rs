use eta_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Dense depth in meters with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn empty(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn fully_valid(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// One frame: image, sparse depth and optional dense ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub sparse: DepthMap,
    pub gt: Option<DepthMap>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        let bad = |m: String| Err(Error::invalid(format!("sample `{}`: {m}", self.frame_id)));
        if n == 0 {
            return bad("empty geometry".into());
        }
        if self.image.len() != 3 * n {
            return bad(format!("image has {} values, expected {}", self.image.len(), 3 * n));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("image values outside [0, 1]".into());
        }
        if self.sparse.values.len() != n || self.sparse.mask.len() != n {
            return bad("sparse depth size mismatch".into());
        }
        for (v, &m) in self.sparse.values.iter().zip(&self.sparse.mask) {
            if m && !(*v > 0.0 && v.is_finite()) {
                return bad("valid sparse depth must be finite and > 0".into());
            }
            if !m && *v != 0.0 {
                return bad("sparse depth must be 0 where the mask is false".into());
            }
        }
        if let Some(gt) = &self.gt {
            if gt.values.len() != n || gt.mask.len() != n {
                return bad("ground truth size mismatch".into());
            }
            if gt
                .values
                .iter()
                .zip(&gt.mask)
                .any(|(v, &m)| m && !(*v > 0.0 && v.is_finite()))
            {
                return bad("valid ground truth must be finite and > 0".into());
            }
        }
        Ok(())
    }
}

/// A stack of samples as NCHW tensors.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub frame_ids: Vec<String>,
    pub image: Tensor<T>,
    pub sparse: Tensor<T>,
    pub sparse_mask: Tensor<T>,
    pub gt: Option<Tensor<T>>,
    pub gt_mask: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let n = samples.len();
        let hw = h * w;
        let mut image = Vec::with_capacity(n * 3 * hw);
        let mut sparse = Vec::with_capacity(n * hw);
        let mut mask = Vec::with_capacity(n * hw);
        let has_gt = samples.iter().all(|s| s.gt.is_some());
        let mut gt = Vec::new();
        let mut gt_mask = Vec::new();
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::GeometryMismatch {
                    id: s.frame_id.clone(),
                    expected: (h, w),
                    found: (s.height, s.width),
                });
            }
            for c in 0..3 {
                image.extend((0..hw).map(|p| T::from_f32(s.image[p * 3 + c]).unwrap()));
            }
            sparse.extend(s.sparse.values.iter().map(|&v| T::from_f32(v).unwrap()));
            mask.extend(s.sparse.mask.iter().map(|&m| if m { T::one() } else { T::zero() }));
            if has_gt {
                let g = s.gt.as_ref().unwrap();
                gt.extend(g.values.iter().map(|&v| T::from_f32(v).unwrap()));
                gt_mask.extend(g.mask.iter().map(|&m| if m { T::one() } else { T::zero() }));
            }
        }
        Ok(Self {
            frame_ids: samples.iter().map(|s| s.frame_id.clone()).collect(),
            image: Tensor::from_vec(&[n, 3, h, w], image),
            sparse: Tensor::from_vec(&[n, 1, h, w], sparse),
            sparse_mask: Tensor::from_vec(&[n, 1, h, w], mask),
            gt: has_gt.then(|| Tensor::from_vec(&[n, 1, h, w], gt)),
            gt_mask: has_gt.then(|| Tensor::from_vec(&[n, 1, h, w], gt_mask)),
        })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize) {
        let (_, _, h, w) = self.image.dims4();
        (h, w)
    }
}
