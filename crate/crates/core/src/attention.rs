//! Channel-wise and pixel-wise attention refiners, the segmentation head,
//! and mask-to-box extraction.
//!
//! Channel attention gates each channel by a squeeze-excite style factor in
//! (0, 1); pixel attention builds a single-channel spatial mask that is
//! both multiplied into the map and added onto it (`out = fm * A + A`,
//! mask broadcast across channels). The mask is also returned so the loss
//! can supervise it directly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::imgproc::raster::{component_boxes, connected_components};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::tape::{Conv2dSpec, Tape, TensorId};
use crate::nn::{ParamBinding, ParamSet};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Squeeze-excite bottleneck reduction ratio.
    pub reduction: usize,
    /// Filters in the pixel-attention hidden convolution.
    pub pixel_filters: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { reduction: 16, pixel_filters: 16 }
    }
}

/// Squeeze-excite channel gate: GAP -> FC (C -> C/r) -> ReLU ->
/// FC (C/r -> C) -> sigmoid, multiplied per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        let fc1 = Linear::new(ps, rng, &format!("{name}.fc1"), channels, hidden)?;
        let fc2 = Linear::new(ps, rng, &format!("{name}.fc2"), hidden, channels)?;
        Ok(ChannelAttention { fc1, fc2, channels })
    }

    /// Returns the gated map and the gate vector.
    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, fm: TensorId) -> Result<(TensorId, TensorId)> {
        let c = t.value(fm).shape()[0];
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let squeezed = t.global_avg_pool(fm)?;
        let h = self.fc1.forward(t, bind, squeezed)?;
        let h = t.relu(h);
        let h = self.fc2.forward(t, bind, h)?;
        let gate = t.sigmoid(h);
        let gate3 = t.reshape(gate, &[c, 1, 1])?;
        let out = t.mul(fm, gate3)?;
        Ok((out, gate))
    }
}

/// Pixel attention: two 3x3 convolutions produce a 1-channel mask in
/// (0, 1); the output is `fm * mask + mask` with the mask broadcast across
/// channels.
#[derive(Debug, Clone)]
pub struct PixelAttention {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PixelAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        filters: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), channels, filters, 3, Conv2dSpec::same_3x3())?;
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), filters, 1, 3, Conv2dSpec::same_3x3())?;
        Ok(PixelAttention { conv1, conv2 })
    }

    /// Returns the refined map and the `[1, H, W]` attention mask.
    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, fm: TensorId) -> Result<(TensorId, TensorId)> {
        let h = self.conv1.forward(t, bind, fm)?;
        let h = t.relu(h);
        let h = self.conv2.forward(t, bind, h)?;
        let mask = t.sigmoid(h);
        let gated = t.mul(fm, mask)?;
        let out = t.add(gated, mask)?;
        Ok((out, mask))
    }
}

/// 1x1 projection to a single channel, sigmoid, bilinear upsample to the
/// region resolution.
#[derive(Debug, Clone)]
pub struct SegmentationHead {
    conv: Conv2d,
}

impl SegmentationHead {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        let conv = Conv2d::new(ps, rng, &format!("{name}.proj"), channels, 1, 1, Conv2dSpec::unit())?;
        Ok(SegmentationHead { conv })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        bind: &ParamBinding,
        fm: TensorId,
        out_size: (usize, usize),
    ) -> Result<TensorId> {
        let h = self.conv.forward(t, bind, fm)?;
        let p = t.sigmoid(h);
        t.upsample_bilinear(p, out_size)
    }
}

/// A per-pixel drone probability map together with the frame-coordinate
/// rectangle it describes, so boxes extracted from it can be mapped back to
/// frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMask {
    /// H x W values in [0, 1].
    pub values: Array2<f64>,
    /// Frame-coordinate rect covered by this mask.
    pub frame_rect: BoundingBox,
    pub frame_index: usize,
}

impl ProbabilityMask {
    pub fn new(values: Array2<f64>, frame_rect: BoundingBox, frame_index: usize) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::numerical("probability mask values outside [0, 1]".to_string()));
        }
        Ok(ProbabilityMask { values, frame_rect, frame_index })
    }

    /// Scale factors from mask pixels to frame pixels.
    pub fn scale(&self) -> (f64, f64) {
        let (h, w) = self.values.dim();
        (self.frame_rect.width() / w as f64, self.frame_rect.height() / h as f64)
    }
}

pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_AREA: usize = 4;

/// Binarize a probability mask, label 8-connected components, and emit one
/// detection per component: the tight box mapped to frame coordinates,
/// scored by the mean probability inside the component. Components smaller
/// than `min_area` mask pixels are dropped.
pub fn mask_to_boxes(mask: &ProbabilityMask, bin_threshold: f64, min_area: usize) -> Result<Vec<Detection>> {
    if !(bin_threshold > 0.0 && bin_threshold < 1.0) {
        return Err(Error::config(format!("bin_threshold {bin_threshold} outside (0, 1)")));
    }
    let binary = mask.values.mapv(|v| v >= bin_threshold);
    let (labels, count) = connected_components(&binary);
    if count == 0 {
        return Ok(Vec::new());
    }
    let boxes = component_boxes(&labels, count);
    let (sx, sy) = mask.scale();
    let mut sums = vec![0.0f64; count];
    let (h, w) = mask.values.dim();
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l > 0 {
                sums[(l - 1) as usize] += mask.values[[y, x]];
            }
        }
    }
    let mut dets = Vec::new();
    for (i, (b, area)) in boxes.iter().enumerate() {
        if *area < min_area {
            continue;
        }
        let frame_box = BoundingBox::new(
            mask.frame_rect.x1 + b.x1 * sx,
            mask.frame_rect.y1 + b.y1 * sy,
            mask.frame_rect.x1 + b.x2 * sx,
            mask.frame_rect.y1 + b.y2 * sy,
        )?;
        let score = (sums[i] / *area as f64).clamp(0.0, 1.0);
        dets.push(Detection::new(frame_box, score, mask.frame_index)?);
    }
    Ok(dets)
}
