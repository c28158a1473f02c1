//! Spatio-temporal cuboids: track a candidate box a few frames forward and
//! backward, cut an N x N patch around the track in every frame, and resize
//! the stack to 224 x 224 x 8 for feature extraction.

pub mod extractor;
pub mod tracker;

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::imgproc::{crop_replicate, resize_bilinear_rgb, GrayImage, RgbImage};
pub use extractor::{
    extractor_from_checkpoint, make_extractor, CuboidTensor, Small3dExtractor,
    SpatioTemporalExtractor, StubExtractor, CUBOID_DEPTH, CUBOID_SIZE, EXTRACTOR_OUT_CHANNELS,
    EXTRACTOR_OUT_SIZE,
};
pub use tracker::{MosseTracker, TrackerParams};

/// Position of the anchor frame inside the 8-frame window
/// (anchor-4 .. anchor+3).
pub const ANCHOR_SLOT: usize = 4;

/// An 8-frame track of one candidate: the anchor box tracked 3 frames
/// forward and 4 frames backward.
#[derive(Debug, Clone)]
pub struct Track {
    /// Video frame index of the anchor.
    pub anchor_frame: usize,
    /// Boxes at window slots 0..8 (video frames anchor-4 .. anchor+3).
    pub boxes: [BoundingBox; CUBOID_DEPTH],
    /// Set when the tracker lost confidence (box carried over) or the slot
    /// is edge-of-video padding.
    pub drift_flags: [bool; CUBOID_DEPTH],
    /// Actual (clamped) video frame index per slot.
    pub frame_indices: [usize; CUBOID_DEPTH],
    /// Slots that repeat a terminal frame because the video ended.
    pub padded: [bool; CUBOID_DEPTH],
}

/// Video frame indices for an 8-frame window around `anchor`, clamped to
/// `[0, frame_count)`; the flag marks repeated terminal frames.
pub fn window_indices(anchor: usize, frame_count: usize) -> Result<([usize; CUBOID_DEPTH], [bool; CUBOID_DEPTH])> {
    if frame_count == 0 || anchor >= frame_count {
        return Err(Error::data(format!(
            "anchor {anchor} outside video of {frame_count} frames"
        )));
    }
    let mut idx = [0usize; CUBOID_DEPTH];
    let mut padded = [false; CUBOID_DEPTH];
    for (slot, item) in idx.iter_mut().enumerate() {
        let raw = anchor as isize + slot as isize - ANCHOR_SLOT as isize;
        let clamped = raw.clamp(0, frame_count as isize - 1);
        *item = clamped as usize;
        padded[slot] = clamped != raw;
    }
    Ok((idx, padded))
}

/// Track a seed box over a stabilized 8-frame window: forward from the
/// anchor slot to the end, backward from the anchor to the start. Boxes
/// keep the seed size; drifted steps carry the previous box.
pub fn track_candidate(
    frames: &[GrayImage; CUBOID_DEPTH],
    anchor_frame: usize,
    frame_indices: [usize; CUBOID_DEPTH],
    padded: [bool; CUBOID_DEPTH],
    seed: BoundingBox,
    params: &TrackerParams,
) -> Result<Track> {
    let (h, w) = frames[ANCHOR_SLOT].dim();
    let (cx, cy) = seed.center();
    if !(cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64) {
        return Err(Error::data(format!(
            "track seed center ({cx}, {cy}) outside {w}x{h} frame"
        )));
    }
    let size = (seed.width(), seed.height());
    let mut centers = [(cx, cy); CUBOID_DEPTH];
    let mut drift = [false; CUBOID_DEPTH];

    // forward: anchor+1 .. anchor+3
    let mut tracker = MosseTracker::init(&frames[ANCHOR_SLOT], (cx, cy), size, params)?;
    for slot in ANCHOR_SLOT + 1..CUBOID_DEPTH {
        let (nx, ny, d) = tracker.step(&frames[slot]);
        centers[slot] = (nx, ny);
        drift[slot] = d;
    }
    // backward: anchor-1 .. anchor-4
    let mut tracker = MosseTracker::init(&frames[ANCHOR_SLOT], (cx, cy), size, params)?;
    for slot in (0..ANCHOR_SLOT).rev() {
        let (nx, ny, d) = tracker.step(&frames[slot]);
        centers[slot] = (nx, ny);
        drift[slot] = d;
    }

    let mut boxes = [seed; CUBOID_DEPTH];
    let mut flags = [false; CUBOID_DEPTH];
    for slot in 0..CUBOID_DEPTH {
        let (ccx, ccy) = centers[slot];
        boxes[slot] = BoundingBox::new(
            ccx - size.0 / 2.0,
            ccy - size.1 / 2.0,
            ccx + size.0 / 2.0,
            ccy + size.1 / 2.0,
        )?;
        flags[slot] = drift[slot] || padded[slot];
    }
    Ok(Track {
        anchor_frame,
        boxes,
        drift_flags: flags,
        frame_indices,
        padded,
    })
}

/// Patch-size policy: a fixed N, or N proportional to the tracked box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum PatchPolicy {
    Fixed { n: usize },
    BoxProportional { multiplier: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CuboidSpec {
    pub policy: PatchPolicy,
    pub min_n: usize,
    pub max_n: usize,
}

impl CuboidSpec {
    /// Fixed 100 x 100 patches.
    pub fn fixed_100() -> Self {
        CuboidSpec { policy: PatchPolicy::Fixed { n: 100 }, min_n: 32, max_n: 256 }
    }

    /// Patch size follows the tracked box (2x its larger side).
    pub fn box_proportional() -> Self {
        CuboidSpec { policy: PatchPolicy::BoxProportional { multiplier: 2.0 }, min_n: 32, max_n: 256 }
    }

    pub fn patch_side(&self, track: &Track) -> Result<usize> {
        let n = match self.policy {
            PatchPolicy::Fixed { n } => n,
            PatchPolicy::BoxProportional { multiplier } => {
                let max_side = track
                    .boxes
                    .iter()
                    .map(|b| b.width().max(b.height()))
                    .fold(0.0f64, f64::max);
                (max_side * multiplier).round() as usize
            }
        };
        let n = n.clamp(self.min_n, self.max_n);
        if n < 32 {
            return Err(Error::config(format!("cuboid patch side {n} below minimum 32")));
        }
        Ok(n)
    }
}

/// An 8-deep stack of patches around a track, resized to 224 x 224, with
/// the frame-coordinate rect of every pre-resize patch.
#[derive(Debug, Clone)]
pub struct Cuboid {
    /// 8 patches, each `[3, 224, 224]`.
    pub patches: Vec<RgbImage>,
    /// Frame-coordinate rect of the N x N source window per slot.
    pub rects: [BoundingBox; CUBOID_DEPTH],
    /// Fraction of replicated (out-of-frame) pixels per slot.
    pub padded_fraction: [f64; CUBOID_DEPTH],
    /// Pre-resize patch side N.
    pub n: usize,
    pub track: Track,
}

impl Cuboid {
    /// Map a point from 224-space of `slot`'s patch into frame coordinates.
    pub fn cuboid_to_frame(&self, slot: usize, x: f64, y: f64) -> (f64, f64) {
        let r = &self.rects[slot];
        let s = self.n as f64 / CUBOID_SIZE as f64;
        (r.x1 + x * s, r.y1 + y * s)
    }

    /// Inverse of `cuboid_to_frame`.
    pub fn frame_to_cuboid(&self, slot: usize, x: f64, y: f64) -> (f64, f64) {
        let r = &self.rects[slot];
        let s = CUBOID_SIZE as f64 / self.n as f64;
        ((x - r.x1) * s, (y - r.y1) * s)
    }

    /// Map a box from the anchor patch's 224-space to frame coordinates.
    pub fn box_to_frame(&self, b: &BoundingBox) -> Result<BoundingBox> {
        let (x1, y1) = self.cuboid_to_frame(ANCHOR_SLOT, b.x1, b.y1);
        let (x2, y2) = self.cuboid_to_frame(ANCHOR_SLOT, b.x2, b.y2);
        BoundingBox::new(x1, y1, x2, y2)
    }

    /// Channels-first tensor `[3, 8, 224, 224]` for the extractor.
    pub fn to_tensor(&self) -> CuboidTensor {
        let mut t = CuboidTensor::zeros((3, CUBOID_DEPTH, CUBOID_SIZE, CUBOID_SIZE));
        for (slot, patch) in self.patches.iter().enumerate() {
            for c in 0..3 {
                for y in 0..CUBOID_SIZE {
                    for x in 0..CUBOID_SIZE {
                        t[[c, slot, y, x]] = patch[[c, y, x]];
                    }
                }
            }
        }
        t
    }
}

/// Cut N x N patches centered on each track box center (edge replication
/// outside the frame) and bilinearly resize each to 224 x 224.
pub fn build_cuboid(frames: &[RgbImage; CUBOID_DEPTH], track: &Track, spec: &CuboidSpec) -> Result<Cuboid> {
    let n = spec.patch_side(track)?;
    let mut patches = Vec::with_capacity(CUBOID_DEPTH);
    let mut rects = [BoundingBox::new(0.0, 0.0, 1.0, 1.0)?; CUBOID_DEPTH];
    let mut padded_fraction = [0.0; CUBOID_DEPTH];
    for slot in 0..CUBOID_DEPTH {
        let (cx, cy) = track.boxes[slot].center();
        let x0 = (cx - n as f64 / 2.0).round() as isize;
        let y0 = (cy - n as f64 / 2.0).round() as isize;
        let (patch, frac) = crop_replicate(&frames[slot], x0, y0, n, n);
        patches.push(resize_bilinear_rgb(&patch, CUBOID_SIZE, CUBOID_SIZE));
        rects[slot] = BoundingBox::new(x0 as f64, y0 as f64, (x0 + n as isize) as f64, (y0 + n as isize) as f64)?;
        padded_fraction[slot] = frac;
    }
    Ok(Cuboid {
        patches,
        rects,
        padded_fraction,
        n,
        track: track.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gray_scene(seed: u64, cx: f64, cy: f64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg = Array2::from_shape_fn((128, 128), |_| rng.gen_range(0.4..0.6));
        let mut img = crate::imgproc::gaussian_blur(&bg, 1.0);
        let mut orng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        for dy in 0..12 {
            for dx in 0..12 {
                let x = (cx as isize - 6 + dx).clamp(0, 127) as usize;
                let y = (cy as isize - 6 + dy).clamp(0, 127) as usize;
                img[[y, x]] = orng.gen_range(0.0..0.2);
            }
        }
        img
    }

    #[test]
    fn window_indices_interior_and_edges() {
        let (idx, padded) = window_indices(10, 64).unwrap();
        assert_eq!(idx, [6, 7, 8, 9, 10, 11, 12, 13]);
        assert!(padded.iter().all(|p| !p));

        // anchor at frame 2: backward frames clamp to 0
        let (idx, padded) = window_indices(2, 64).unwrap();
        assert_eq!(idx, [0, 0, 0, 1, 2, 3, 4, 5]);
        assert_eq!(padded, [true, true, false, false, false, false, false, false]);

        // anchor near the end: forward frames clamp
        let (idx, padded) = window_indices(63, 64).unwrap();
        assert_eq!(idx, [59, 60, 61, 62, 63, 63, 63, 63]);
        assert_eq!(padded, [false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn static_track_stays_on_seed() {
        let f = gray_scene(1, 64.0, 64.0);
        let frames: [GrayImage; 8] = std::array::from_fn(|_| f.clone());
        let seed = bb(58.0, 58.0, 70.0, 70.0);
        let track = track_candidate(&frames, 10, [6, 7, 8, 9, 10, 11, 12, 13], [false; 8], seed, &TrackerParams::default()).unwrap();
        for b in &track.boxes {
            let (cx, cy) = b.center();
            assert!((cx - 64.0).abs() < 1.0 && (cy - 64.0).abs() < 1.0, "center ({cx}, {cy})");
        }
        assert_eq!(track.boxes.len(), 8);
    }

    #[test]
    fn linear_motion_tracked_both_directions() {
        // object at (40 + 2t, 60) for window slots t = 0..8
        let frames: [GrayImage; 8] = std::array::from_fn(|t| gray_scene(2, 40.0 + 2.0 * t as f64, 60.0));
        let anchor_center_x = 40.0 + 2.0 * ANCHOR_SLOT as f64;
        let seed = bb(anchor_center_x - 6.0, 54.0, anchor_center_x + 6.0, 66.0);
        let track = track_candidate(&frames, 20, [16, 17, 18, 19, 20, 21, 22, 23], [false; 8], seed, &TrackerParams::default()).unwrap();
        for (t, b) in track.boxes.iter().enumerate() {
            let (cx, cy) = b.center();
            let ex = 40.0 + 2.0 * t as f64;
            assert!(
                (cx - ex).abs() < 2.0 && (cy - 60.0).abs() < 2.0,
                "slot {t}: ({cx:.1}, {cy:.1}) expected ({ex}, 60)"
            );
        }
    }

    #[test]
    fn padding_slots_flagged() {
        let f = gray_scene(3, 64.0, 64.0);
        let frames: [GrayImage; 8] = std::array::from_fn(|_| f.clone());
        let (idx, padded) = window_indices(2, 100).unwrap();
        let seed = bb(58.0, 58.0, 70.0, 70.0);
        let track = track_candidate(&frames, 2, idx, padded, seed, &TrackerParams::default()).unwrap();
        assert!(track.drift_flags[0] && track.drift_flags[1]);
        assert!(!track.drift_flags[4]);
    }

    #[test]
    fn seed_outside_frame_is_error() {
        let f = gray_scene(4, 64.0, 64.0);
        let frames: [GrayImage; 8] = std::array::from_fn(|_| f.clone());
        let seed = bb(300.0, 300.0, 320.0, 320.0);
        assert!(track_candidate(&frames, 5, [1, 2, 3, 4, 5, 6, 7, 8], [false; 8], seed, &TrackerParams::default()).is_err());
    }

    fn rgb_frames(seed: u64) -> [RgbImage; 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| Array3::from_shape_fn((3, 128, 128), |_| rng.gen_range(0.0..1.0)))
    }

    fn straight_track(cx: f64, cy: f64, size: f64) -> Track {
        let b = bb(cx - size / 2.0, cy - size / 2.0, cx + size / 2.0, cy + size / 2.0);
        Track {
            anchor_frame: 10,
            boxes: [b; 8],
            drift_flags: [false; 8],
            frame_indices: [6, 7, 8, 9, 10, 11, 12, 13],
            padded: [false; 8],
        }
    }

    #[test]
    fn cuboid_shape_contract() {
        let frames = rgb_frames(1);
        let track = straight_track(64.0, 64.0, 12.0);
        let cuboid = build_cuboid(&frames, &track, &CuboidSpec { policy: PatchPolicy::Fixed { n: 64 }, min_n: 32, max_n: 256 }).unwrap();
        assert_eq!(cuboid.patches.len(), 8);
        for p in &cuboid.patches {
            assert_eq!(p.dim(), (3, 224, 224));
        }
        assert_eq!(cuboid.n, 64);
    }

    #[test]
    fn corner_track_pads_without_crash() {
        let frames = rgb_frames(2);
        let track = straight_track(3.0, 3.0, 10.0);
        let cuboid = build_cuboid(&frames, &track, &CuboidSpec::fixed_100()).unwrap();
        assert!(cuboid.padded_fraction[0] > 0.0, "corner patch must report padding");
        for p in &cuboid.patches {
            assert!(p.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn centered_object_stays_centered() {
        // with exact centering, the patch center maps back to the box center
        let frames = rgb_frames(3);
        let track = straight_track(64.0, 64.0, 16.0);
        let cuboid = build_cuboid(&frames, &track, &CuboidSpec { policy: PatchPolicy::Fixed { n: 64 }, min_n: 32, max_n: 256 }).unwrap();
        for slot in 0..8 {
            let (fx, fy) = cuboid.cuboid_to_frame(slot, 112.0, 112.0);
            assert!((fx - 64.0).abs() <= 2.0 && (fy - 64.0).abs() <= 2.0, "({fx}, {fy})");
        }
    }

    #[test]
    fn coordinate_roundtrip_exact() {
        let frames = rgb_frames(4);
        let track = straight_track(50.0, 70.0, 14.0);
        let cuboid = build_cuboid(&frames, &track, &CuboidSpec::fixed_100()).unwrap();
        for slot in 0..8 {
            for &(x, y) in &[(0.0, 0.0), (112.0, 30.0), (223.9, 223.9), (17.25, 200.5)] {
                let (fx, fy) = cuboid.cuboid_to_frame(slot, x, y);
                let (bx, by) = cuboid.frame_to_cuboid(slot, fx, fy);
                approx::assert_abs_diff_eq!(bx, x, epsilon = 1e-9);
                approx::assert_abs_diff_eq!(by, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn box_proportional_patch_size() {
        let track = straight_track(64.0, 64.0, 20.0);
        let spec = CuboidSpec::box_proportional();
        assert_eq!(spec.patch_side(&track).unwrap(), 40);
        // tiny boxes clamp up to the minimum
        let small = straight_track(64.0, 64.0, 8.0);
        assert_eq!(spec.patch_side(&small).unwrap(), 32);
    }

    #[test]
    fn drift_flag_count_monotone_in_threshold() {
        // raising the confidence threshold can only add drift flags
        let frames: [GrayImage; 8] = std::array::from_fn(|t| gray_scene(5, 40.0 + 3.0 * t as f64, 50.0));
        let seed = bb(46.0, 44.0, 58.0, 56.0);
        let mut last = 0;
        for tau in [0.05, 0.3, 0.6, 0.9, 0.99] {
            let params = TrackerParams { confidence_threshold: tau, ..TrackerParams::default() };
            let track = track_candidate(&frames, 20, [16, 17, 18, 19, 20, 21, 22, 23], [false; 8], seed, &params).unwrap();
            let n = track.drift_flags.iter().filter(|f| **f).count();
            assert!(n >= last, "drift count decreased: {n} < {last} at tau {tau}");
            last = n;
        }
    }
}
