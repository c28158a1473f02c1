//! Spatial feature extraction for the segmentation stage: a four-block
//! residual backbone whose blocks are all fused into one map, followed by
//! four-scale pyramid pooling.
//!
//! Blocks 3 and 4 trade stride for dilation so the deep maps keep 1/8
//! resolution; with the full-width configuration a 473x473 input yields
//! block maps of 119^2 and 60^2. The reference-small configuration keeps
//! the same topology at a fraction of the width so desk-scale training and
//! finite-difference checks stay cheap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ResidualBlock};
use crate::nn::tape::{Conv2dSpec, Tape, TensorId};
use crate::nn::{ParamBinding, ParamSet};
use rand_chacha::ChaCha8Rng;

/// Width preset for the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneScale {
    ReferenceSmall,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Square network input size in pixels.
    pub input_size: usize,
    /// Output channels of the four blocks.
    pub block_channels: [usize; 4],
    /// Channels after the 1x1 fusion of all blocks.
    pub fused_channels: usize,
    pub scale: BackboneScale,
}

impl BackboneConfig {
    pub fn reference_small() -> Self {
        BackboneConfig {
            input_size: 96,
            block_channels: [16, 32, 48, 64],
            fused_channels: 64,
            scale: BackboneScale::ReferenceSmall,
        }
    }

    pub fn full() -> Self {
        BackboneConfig {
            input_size: 473,
            block_channels: [256, 512, 1024, 2048],
            fused_channels: 2048,
            scale: BackboneScale::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fused_channels == 0 || self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone channel counts must be positive".to_string()));
        }
        if self.fused_channels % 4 != 0 {
            return Err(Error::config(
                "fused_channels must be divisible by 4 for pyramid pooling".to_string(),
            ));
        }
        if self.input_size < 48 {
            return Err(Error::config(format!(
                "input_size {} too small for stride-8 maps with 6x6 pyramid bins",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Input normalization constants recorded with the model: inputs are
    /// shifted and scaled as `(v - mean) / std` per channel.
    pub fn normalization() -> ([f64; 3], [f64; 3]) {
        ([0.5, 0.5, 0.5], [0.25, 0.25, 0.25])
    }
}

/// Four-block residual backbone with strides 4/8/8/8 (dilation 2 and 4 in
/// blocks 3 and 4).
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    blocks: [ResidualBlock; 4],
}

impl Backbone {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3, c4] = cfg.block_channels;
        let stem = Conv2d::new(
            ps,
            rng,
            &format!("{name}.stem"),
            3,
            c1,
            7,
            Conv2dSpec { stride: 2, pad: 3, dilation: 1 },
        )?;
        let blocks = [
            ResidualBlock::new(ps, rng, &format!("{name}.block1"), c1, c1, 1, 1)?,
            ResidualBlock::new(ps, rng, &format!("{name}.block2"), c1, c2, 2, 1)?,
            ResidualBlock::new(ps, rng, &format!("{name}.block3"), c2, c3, 1, 2)?,
            ResidualBlock::new(ps, rng, &format!("{name}.block4"), c3, c4, 1, 4)?,
        ];
        Ok(Backbone { stem, blocks })
    }

    /// Run the backbone on a normalized `[3, H, W]` input; returns the four
    /// block maps (block 1 at stride 4, blocks 2-4 at stride 8).
    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, image: TensorId) -> Result<[TensorId; 4]> {
        if t.value(image).iter().any(|v| !v.is_finite()) {
            return Err(Error::data("backbone input contains non-finite values".to_string()));
        }
        let x = self.stem.forward(t, bind, image)?;
        let x = t.relu(x);
        let x = t.max_pool2d(x, 3, 2, 1)?;
        let b1 = self.blocks[0].forward(t, bind, x)?;
        let b2 = self.blocks[1].forward(t, bind, b1)?;
        let b3 = self.blocks[2].forward(t, bind, b2)?;
        let b4 = self.blocks[3].forward(t, bind, b3)?;
        Ok([b1, b2, b3, b4])
    }
}

/// 1x1 fusion of the four block maps: block 1 is bilinearly resized down to
/// the stride-8 grid, all maps are concatenated on the channel axis, and a
/// learned 1x1 convolution projects back to `fused_channels`.
#[derive(Debug, Clone)]
pub struct BlockFusion {
    conv: Conv2d,
}

impl BlockFusion {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let cin: usize = cfg.block_channels.iter().sum();
        let conv = Conv2d::new(ps, rng, &format!("{name}.proj"), cin, cfg.fused_channels, 1, Conv2dSpec::unit())?;
        Ok(BlockFusion { conv })
    }

    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, blocks: &[TensorId; 4]) -> Result<TensorId> {
        let target = {
            let s = t.value(blocks[1]).shape();
            (s[1], s[2])
        };
        for (i, &b) in blocks.iter().enumerate().skip(2) {
            let s = t.value(b).shape();
            if (s[1], s[2]) != target {
                return Err(Error::shape(format!(
                    "fuse_blocks: block {} is {}x{}, expected {}x{}",
                    i + 1,
                    s[1],
                    s[2],
                    target.0,
                    target.1
                )));
            }
        }
        {
            let s = t.value(blocks[0]).shape();
            if s[1] < target.0 || s[2] < target.1 {
                return Err(Error::shape(format!(
                    "fuse_blocks: block 1 ({}x{}) smaller than block 2 ({}x{})",
                    s[1], s[2], target.0, target.1
                )));
            }
        }
        let b1 = t.upsample_bilinear(blocks[0], target)?;
        let cat = t.concat(&[b1, blocks[1], blocks[2], blocks[3]], 0)?;
        let fused = self.conv.forward(t, bind, cat)?;
        Ok(t.relu(fused))
    }
}

pub const DEFAULT_PYRAMID_BINS: [usize; 4] = [1, 2, 3, 6];

/// Four-scale pyramid pooling: each bin size adaptively average-pools the
/// map, projects to C/4 channels with a 1x1 convolution, upsamples back,
/// and the branches are concatenated with the input (output channels 2C).
#[derive(Debug, Clone)]
pub struct PyramidPooling {
    pub bins: [usize; 4],
    convs: [Conv2d; 4],
}

impl PyramidPooling {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        bins: [usize; 4],
    ) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::config(format!(
                "pyramid pooling needs channels divisible by 4, got {channels}"
            )));
        }
        let branch = channels / 4;
        let mk = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, i: usize| {
            Conv2d::new(ps, rng, &format!("{name}.branch{i}"), channels, branch, 1, Conv2dSpec::unit())
        };
        Ok(PyramidPooling {
            bins,
            convs: [mk(ps, rng, 0)?, mk(ps, rng, 1)?, mk(ps, rng, 2)?, mk(ps, rng, 3)?],
        })
    }

    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        let (h, w) = {
            let s = t.value(x).shape();
            (s[1], s[2])
        };
        for &b in &self.bins {
            if b > h || b > w {
                return Err(Error::config(format!(
                    "pyramid bin {b} exceeds spatial dims ({h}, {w})"
                )));
            }
        }
        let mut parts = vec![x];
        for (i, &b) in self.bins.iter().enumerate() {
            let pooled = t.adaptive_avg_pool(x, (b, b))?;
            let proj = self.convs[i].forward(t, bind, pooled)?;
            let proj = t.relu(proj);
            let up = t.upsample_bilinear(proj, (h, w))?;
            parts.push(up);
        }
        t.concat(&parts, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;

    fn ceil_div(a: usize, b: usize) -> usize {
        a.div_ceil(b)
    }

    #[test]
    fn backbone_spatial_sizes_follow_stride_arithmetic() {
        // stride oracle: block1 at ceil(input/4), blocks 2-4 at ceil(input/8)
        for input in [48, 96, 128, 160] {
            let mut cfg = BackboneConfig::reference_small();
            cfg.input_size = input;
            let mut ps = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let bb = Backbone::new(&mut ps, &mut rng, "bb", &cfg).unwrap();
            let mut t = Tape::new();
            let bind = ps.inject_frozen(&mut t);
            let img = t.constant(ArrayD::zeros(IxDyn(&[3, input, input])));
            let blocks = bb.forward(&mut t, &bind, img).unwrap();
            let expect = [
                (ceil_div(input, 4), cfg.block_channels[0]),
                (ceil_div(input, 8), cfg.block_channels[1]),
                (ceil_div(input, 8), cfg.block_channels[2]),
                (ceil_div(input, 8), cfg.block_channels[3]),
            ];
            for (b, (size, ch)) in blocks.iter().zip(expect) {
                assert_eq!(t.value(*b).shape(), &[ch, size, size]);
            }
        }
    }

    #[test]
    fn full_width_473_yields_119_and_60() {
        // stride arithmetic only; no full-width forward needed
        assert_eq!(ceil_div(473, 4), 119);
        assert_eq!(ceil_div(473, 8), 60);
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let cfg = BackboneConfig::reference_small();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::new(&mut ps, &mut rng, "bb", &cfg).unwrap();
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let img = t.constant(ArrayD::zeros(IxDyn(&[3, 48, 48])));
        let blocks = bb.forward(&mut t, &bind, img).unwrap();
        for b in blocks {
            assert!(t.value(b).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn backbone_inference_is_deterministic() {
        let cfg = BackboneConfig::reference_small();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::new(&mut ps, &mut rng, "bb", &cfg).unwrap();
        let img = ArrayD::from_shape_fn(IxDyn(&[3, 48, 48]), |ix| ((ix[0] + 3 * ix[1] + 7 * ix[2]) % 13) as f64 / 13.0);
        let run = || {
            let mut t = Tape::new();
            let bind = ps.inject_frozen(&mut t);
            let i = t.constant(img.clone());
            let blocks = bb.forward(&mut t, &bind, i).unwrap();
            blocks.map(|b| t.value(b).clone())
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y, "outputs differ between identical runs");
        }
    }

    #[test]
    fn fusion_channel_arithmetic_full_width() {
        // (256,512,1024,2048) -> concat 3840 -> project 2048, on tiny maps
        let cfg = BackboneConfig {
            input_size: 473,
            block_channels: [256, 512, 1024, 2048],
            fused_channels: 2048,
            scale: BackboneScale::Full,
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fusion = BlockFusion::new(&mut ps, &mut rng, "fuse", &cfg).unwrap();
        assert_eq!(ps.value(ps.by_name("fuse.proj.w").unwrap()).shape(), &[2048, 3840, 1, 1]);
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let blocks = [
            t.constant(ArrayD::zeros(IxDyn(&[256, 6, 6]))),
            t.constant(ArrayD::zeros(IxDyn(&[512, 3, 3]))),
            t.constant(ArrayD::zeros(IxDyn(&[1024, 3, 3]))),
            t.constant(ArrayD::zeros(IxDyn(&[2048, 3, 3]))),
        ];
        let fused = fusion.forward(&mut t, &bind, &blocks).unwrap();
        assert_eq!(t.value(fused).shape(), &[2048, 3, 3]);
    }

    #[test]
    fn fusion_zero_blocks_yield_bias_response() {
        let cfg = BackboneConfig::reference_small();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fusion = BlockFusion::new(&mut ps, &mut rng, "fuse", &cfg).unwrap();
        // set a recognizable bias
        let bias_ref = ps.by_name("fuse.proj.b").unwrap();
        ps.value_mut(bias_ref).fill(0.25);
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let blocks = [
            t.constant(ArrayD::zeros(IxDyn(&[16, 8, 8]))),
            t.constant(ArrayD::zeros(IxDyn(&[32, 4, 4]))),
            t.constant(ArrayD::zeros(IxDyn(&[48, 4, 4]))),
            t.constant(ArrayD::zeros(IxDyn(&[64, 4, 4]))),
        ];
        let fused = fusion.forward(&mut t, &bind, &blocks).unwrap();
        for v in t.value(fused).iter() {
            approx::assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_blocks() {
        let cfg = BackboneConfig::reference_small();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fusion = BlockFusion::new(&mut ps, &mut rng, "fuse", &cfg).unwrap();
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let blocks = [
            t.constant(ArrayD::zeros(IxDyn(&[16, 8, 8]))),
            t.constant(ArrayD::zeros(IxDyn(&[32, 4, 4]))),
            t.constant(ArrayD::zeros(IxDyn(&[48, 5, 5]))), // wrong
            t.constant(ArrayD::zeros(IxDyn(&[64, 4, 4]))),
        ];
        assert!(fusion.forward(&mut t, &bind, &blocks).is_err());
    }

    #[test]
    fn fusion_output_matches_block2_dims_randomized() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let s2 = rng.gen_range(3..9);
            let s1 = s2 * 2;
            let cfg = BackboneConfig::reference_small();
            let mut ps = ParamSet::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(8);
            let fusion = BlockFusion::new(&mut ps, &mut rng2, "fuse", &cfg).unwrap();
            let mut t = Tape::new();
            let bind = ps.inject_frozen(&mut t);
            let blocks = [
                t.constant(ArrayD::zeros(IxDyn(&[16, s1, s1]))),
                t.constant(ArrayD::zeros(IxDyn(&[32, s2, s2]))),
                t.constant(ArrayD::zeros(IxDyn(&[48, s2, s2]))),
                t.constant(ArrayD::zeros(IxDyn(&[64, s2, s2]))),
            ];
            let fused = fusion.forward(&mut t, &bind, &blocks).unwrap();
            assert_eq!(t.value(fused).shape(), &[64, s2, s2]);
        }
    }

    #[test]
    fn pyramid_channel_arithmetic() {
        // 60x60xC in -> 60x60x2C out
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pp = PyramidPooling::new(&mut ps, &mut rng, "pp", 16, DEFAULT_PYRAMID_BINS).unwrap();
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let x = t.constant(ArrayD::zeros(IxDyn(&[16, 60, 60])));
        let y = pp.forward(&mut t, &bind, x).unwrap();
        assert_eq!(t.value(y).shape(), &[32, 60, 60]);
    }

    #[test]
    fn pyramid_bin_too_large_is_config_error() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pp = PyramidPooling::new(&mut ps, &mut rng, "pp", 16, DEFAULT_PYRAMID_BINS).unwrap();
        let mut t = Tape::new();
        let bind = ps.inject_frozen(&mut t);
        let x = t.constant(ArrayD::zeros(IxDyn(&[16, 4, 4])));
        assert!(pp.forward(&mut t, &bind, x).is_err());
    }

    #[test]
    fn pooled_branches_preserve_constants_before_projection() {
        // adaptive-average-pool + upsample of a constant map is the constant
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[4, 12, 12]), 0.37));
        for b in DEFAULT_PYRAMID_BINS {
            let pooled = t.adaptive_avg_pool(x, (b, b)).unwrap();
            let up = t.upsample_bilinear(pooled, (12, 12)).unwrap();
            for v in t.value(up).iter() {
                approx::assert_abs_diff_eq!(*v, 0.37, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_preserves_spatial_size_randomized() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let h = rng.gen_range(6..20);
            let w = rng.gen_range(6..20);
            let mut ps = ParamSet::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(12);
            let pp = PyramidPooling::new(&mut ps, &mut rng2, "pp", 8, DEFAULT_PYRAMID_BINS).unwrap();
            let mut t = Tape::new();
            let bind = ps.inject_frozen(&mut t);
            let x = t.constant(ArrayD::zeros(IxDyn(&[8, h, w])));
            let y = pp.forward(&mut t, &bind, x).unwrap();
            assert_eq!(t.value(y).shape(), &[16, h, w]);
        }
    }
}
