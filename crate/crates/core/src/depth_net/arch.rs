use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of the dual-branch depth-completion network.
///
/// Both encoders have `image_widths.len()` stages; stage 0 runs at full
/// resolution and each later stage halves it. The decoder has one level per
/// non-final stage, listed coarse to fine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthArch {
    pub image_widths: Vec<usize>,
    pub sparse_widths: Vec<usize>,
    pub fusion_width: usize,
    pub decoder_widths: Vec<usize>,
    /// Image-encoder stage whose output feeds the adaptation module.
    pub adapt_slot: usize,
    /// Bottleneck width is `channels / adapt_reduction` (at least 1).
    pub adapt_reduction: usize,
    /// Depth normalization in meters; also the upper clamp for perturbed
    /// sparse depth. Normally the dataset's `d_max`.
    pub depth_scale: f64,
    pub seed: u64,
}

impl Default for DepthArch {
    fn default() -> Self {
        Self {
            image_widths: vec![8, 16, 32],
            sparse_widths: vec![4, 8, 16],
            fusion_width: 32,
            decoder_widths: vec![16, 8],
            adapt_slot: 1,
            adapt_reduction: 4,
            depth_scale: 10.0,
            seed: 0,
        }
    }
}

impl DepthArch {
    pub fn stages(&self) -> usize {
        self.image_widths.len()
    }

    /// Inputs must be divisible by this factor in both dimensions.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 {
            return Err(Error::invalid("depth architecture needs at least 2 encoder stages"));
        }
        if self.sparse_widths.len() != s {
            return Err(Error::invalid("sparse_widths must have one entry per encoder stage"));
        }
        if self.decoder_widths.len() != s - 1 {
            return Err(Error::invalid("decoder_widths must have stages - 1 entries"));
        }
        let all = self
            .image_widths
            .iter()
            .chain(&self.sparse_widths)
            .chain(&self.decoder_widths)
            .chain(std::iter::once(&self.fusion_width));
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.adapt_reduction == 0 {
            return Err(Error::invalid("adapt_reduction must be positive"));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(Error::invalid("depth_scale must be positive"));
        }
        Ok(())
    }

    pub fn adapter_width(&self, channels: usize) -> usize {
        (channels / self.adapt_reduction).max(1)
    }
}
