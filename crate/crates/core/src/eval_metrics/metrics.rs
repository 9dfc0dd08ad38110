use serde::{Deserialize, Serialize};

use crate::data_synth::DepthMap;
use crate::error::{Error, Result};

/// Pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Inclusive ground-truth range in meters.
    pub depth_range: (f64, f64),
    pub crop: Option<Crop>,
    /// Keep one record per frame rather than only aggregates.
    pub per_frame: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { depth_range: (0.0, 80.0), crop: None, per_frame: true }
    }
}

impl EvalConfig {
    pub fn outdoor() -> Self {
        Self::default()
    }

    pub fn indoor() -> Self {
        Self { depth_range: (0.2, 5.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Config {
                key: "depth_range".into(),
                message: format!("needs 0 <= min < max, got ({lo}, {hi})"),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Phase::Pre),
            "post" => Ok(Phase::Post),
            _ => Err(Error::invalid(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub frame_id: String,
    pub phase: Phase,
    pub mae_m: f64,
    pub rmse_m: f64,
    pub n_pixels: usize,
}

/// Absolute residuals over valid ground truth inside range and crop.
fn residuals(pred: &[f32], gt: &DepthMap, height: usize, width: usize, cfg: &EvalConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = height * width;
    if pred.len() != n || gt.values.len() != n || gt.mask.len() != n {
        return Err(Error::invalid(format!(
            "metric inputs must be {height}x{width}, got {} predictions and {} ground-truth values",
            pred.len(),
            gt.values.len()
        )));
    }
    let (r0, c0, r1, c1) = match cfg.crop {
        Some(c) => {
            if c.top + c.height > height || c.left + c.width > width {
                return Err(Error::invalid(format!("crop {c:?} exceeds {height}x{width}")));
            }
            (c.top, c.left, c.top + c.height, c.left + c.width)
        }
        None => (0, 0, height, width),
    };
    let (lo, hi) = cfg.depth_range;
    let mut out = Vec::new();
    for y in r0..r1 {
        for x in c0..c1 {
            let p = y * width + x;
            let g = gt.values[p] as f64;
            if gt.mask[p] && g >= lo && g <= hi {
                out.push((pred[p] as f64 - g).abs());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no ground-truth pixels left after mask, range and crop"));
    }
    Ok(out)
}

pub fn mae(pred: &[f32], gt: &DepthMap, height: usize, width: usize, cfg: &EvalConfig) -> Result<f64> {
    let r = residuals(pred, gt, height, width, cfg)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

pub fn rmse(pred: &[f32], gt: &DepthMap, height: usize, width: usize, cfg: &EvalConfig) -> Result<f64> {
    let r = residuals(pred, gt, height, width, cfg)?;
    Ok((r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
}

/// Both metrics over the same pixel set.
pub fn evaluate_frame(
    run_id: &str,
    frame_id: &str,
    phase: Phase,
    pred: &[f32],
    gt: &DepthMap,
    height: usize,
    width: usize,
    cfg: &EvalConfig,
) -> Result<MetricRecord> {
    let r = residuals(pred, gt, height, width, cfg)?;
    let n = r.len() as f64;
    let mae_m = r.iter().sum::<f64>() / n;
    let rmse_m = (r.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    // Jensen: equality up to rounding when all residuals are equal.
    let rmse_m = rmse_m.max(mae_m);
    Ok(MetricRecord {
        run_id: run_id.to_string(),
        frame_id: frame_id.to_string(),
        phase,
        mae_m,
        rmse_m,
        n_pixels: r.len(),
    })
}
