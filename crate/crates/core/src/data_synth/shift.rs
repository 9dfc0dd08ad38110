use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::Sample;
use crate::error::{Error, Result};

/// Constant airlight the fog model blends toward.
pub const FOG_AIRLIGHT: f32 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Identity,
    /// `I' = I t + A (1 - t)`, `t = exp(-magnitude * depth)`.
    Fog,
    /// `I' = exp(-magnitude) * I^(1 + magnitude)`.
    Illumination,
    /// Additive Gaussian noise with standard deviation `magnitude`.
    Noise,
    /// Drops a `magnitude` fraction of the valid sparse points.
    Sparsity,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "fog" => Self::Fog,
            "illumination" => Self::Illumination,
            "noise" => Self::Noise,
            "sparsity" => Self::Sparsity,
            other => return Err(Error::invalid(format!("unknown shift kind `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64, seed: u64) -> Self {
        Self { kind, magnitude, seed }
    }
}

/// Applies a covariate shift. Ground truth is never modified.
pub fn apply_shift(sample: &Sample, spec: &ShiftSpec) -> Result<Sample> {
    let m = spec.magnitude;
    if !(m.is_finite() && m >= 0.0) {
        return Err(Error::invalid(format!("shift magnitude {m} must be finite and >= 0")));
    }
    let mut out = sample.clone();
    if spec.kind == ShiftKind::Identity || m == 0.0 {
        return Ok(out);
    }
    match spec.kind {
        ShiftKind::Identity => {}
        ShiftKind::Fog => {
            let gt = sample
                .gt
                .as_ref()
                .ok_or_else(|| Error::invalid("fog needs dense depth to compute transmittance"))?;
            for p in 0..sample.pixels() {
                let t = (-m * gt.values[p] as f64).exp() as f32;
                for c in 0..3 {
                    let i = &mut out.image[3 * p + c];
                    *i = (*i * t + FOG_AIRLIGHT * (1.0 - t)).clamp(0.0, 1.0);
                }
            }
        }
        ShiftKind::Illumination => {
            let gamma = (1.0 + m) as f32;
            let gain = (-m).exp() as f32;
            for v in &mut out.image {
                *v = (gain * v.powf(gamma)).clamp(0.0, 1.0);
            }
        }
        ShiftKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let dist = Normal::new(0.0, m).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut out.image {
                *v = (*v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        ShiftKind::Sparsity => {
            if m > 1.0 {
                return Err(Error::invalid(format!("sparsity drop fraction {m} exceeds 1")));
            }
            let valid: Vec<usize> = (0..sample.pixels()).filter(|&p| sample.sparse.mask[p]).collect();
            let keep = ((1.0 - m) * valid.len() as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let kept = rand::seq::index::sample(&mut rng, valid.len(), keep);
            out.sparse.values.iter_mut().for_each(|v| *v = 0.0);
            out.sparse.mask.iter_mut().for_each(|v| *v = false);
            for i in kept {
                let p = valid[i];
                out.sparse.values[p] = sample.sparse.values[p];
                out.sparse.mask[p] = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_scene, sample_sparse, SparseStrategy};
    use proptest::prelude::*;

    fn scene(seed: u64) -> Sample {
        let mut s = generate_scene(seed, (64, 64), (1.0, 10.0)).unwrap();
        s.sparse = sample_sparse(s.gt.as_ref().unwrap(), 64, 64, 1500, SparseStrategy::Uniform, seed).unwrap();
        s
    }

    #[test]
    fn identity_is_bit_identical() {
        let s = scene(1);
        let out = apply_shift(&s, &ShiftSpec::new(ShiftKind::Identity, 3.0, 4)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn fog_matches_closed_form_blend() {
        let s = scene(2);
        let beta = 0.2;
        let out = apply_shift(&s, &ShiftSpec::new(ShiftKind::Fog, beta, 0)).unwrap();
        let gt = s.gt.as_ref().unwrap();
        for p in 0..s.pixels() {
            let t = (-beta * gt.values[p] as f64).exp();
            for c in 0..3 {
                let i = s.image[3 * p + c] as f64;
                let want = i * t + FOG_AIRLIGHT as f64 * (1.0 - t);
                assert!((out.image[3 * p + c] as f64 - want).abs() < 1e-6);
                // Contrast against the airlight never grows.
                let before = (i - FOG_AIRLIGHT as f64).abs();
                let after = (out.image[3 * p + c] as f64 - FOG_AIRLIGHT as f64).abs();
                assert!(after <= before * t + 1e-6);
            }
        }
    }

    #[test]
    fn fog_contrast_is_non_increasing_in_depth() {
        // Same pixel value at increasing depth.
        let mut s = scene(3);
        let gt = s.gt.as_mut().unwrap();
        for p in 0..64 {
            gt.values[p] = 1.0 + p as f32 * 0.1;
        }
        for p in 0..64 {
            for c in 0..3 {
                s.image[3 * p + c] = 0.1;
            }
        }
        let out = apply_shift(&s, &ShiftSpec::new(ShiftKind::Fog, 0.3, 0)).unwrap();
        let contrast: Vec<f32> = (0..64).map(|p| (out.image[3 * p] - FOG_AIRLIGHT).abs()).collect();
        assert!(contrast.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sparsity_half_keeps_750_of_1500() {
        let s = scene(4);
        assert_eq!(s.sparse.valid_count(), 1500);
        let out = apply_shift(&s, &ShiftSpec::new(ShiftKind::Sparsity, 0.5, 9)).unwrap();
        assert_eq!(out.sparse.valid_count(), 750);
        out.validate().unwrap();
    }

    #[test]
    fn unknown_kind_and_bad_magnitude_rejected() {
        assert!("haze".parse::<ShiftKind>().is_err());
        let s = scene(5);
        assert!(apply_shift(&s, &ShiftSpec::new(ShiftKind::Fog, -1.0, 0)).is_err());
        assert!(apply_shift(&s, &ShiftSpec::new(ShiftKind::Sparsity, 1.5, 0)).is_err());
    }

    fn kind() -> impl Strategy<Value = ShiftKind> {
        prop_oneof![
            Just(ShiftKind::Identity),
            Just(ShiftKind::Fog),
            Just(ShiftKind::Illumination),
            Just(ShiftKind::Noise),
            Just(ShiftKind::Sparsity),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ground_truth_never_changes(k in kind(), m in 0.0f64..1.0, seed in 0u64..1000) {
            let s = scene(seed % 7);
            let out = apply_shift(&s, &ShiftSpec::new(k, m, seed)).unwrap();
            prop_assert_eq!(&out.gt, &s.gt);
            prop_assert!(out.validate().is_ok());
        }

        #[test]
        fn zero_magnitude_is_a_no_op(k in kind(), seed in 0u64..1000) {
            let s = scene(seed % 5);
            let out = apply_shift(&s, &ShiftSpec::new(k, 0.0, seed)).unwrap();
            prop_assert_eq!(out, s);
        }
    }
}
