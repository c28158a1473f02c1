//! Motion-driven candidate discovery: stabilize a frame triple, compute
//! four inter-frame flows, reduce them to motion-gradient maps, take their
//! pointwise maximum as the motion boundary map, and extract size-filtered
//! candidate boxes from its strongest ridges.

pub mod flow;
pub mod stabilize;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};
use crate::imgproc::raster::{
    component_boxes, connected_components, dilate_ellipse, erode_ellipse, fill_holes, Mask,
};
use crate::imgproc::{GrayImage, RgbImage};
pub use flow::{flow, FlowField, FlowParams};
pub use stabilize::{stabilize, warp_homography, warp_homography_rgb, Homography, StabilizeParams, Stabilization};

/// Per-pixel motion gradient magnitude: the larger of the two flow-component
/// gradient magnitudes, `max(|grad u|, |grad v|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionGradientMap {
    pub g: Array2<f64>,
}

/// Pointwise maximum of the four motion-gradient maps of a stabilized
/// frame triple.
#[derive(Debug, Clone)]
pub struct MotionBoundaryMap {
    pub m: Array2<f64>,
    /// Index of the middle frame of the triple in the source video.
    pub source_frame_index: usize,
    /// Pixels where all four flows were computed on validly warped content.
    pub valid: Mask,
    /// Propagated from stabilization: some frame fell back to identity.
    pub stabilization_fallback: bool,
}

/// Flow-component spatial derivatives by central differences (one-sided at
/// the borders), reduced per Eq. of the motion-gradient definition.
pub fn motion_gradient(f: &FlowField) -> Result<MotionGradientMap> {
    f.validate()?;
    let (h, w) = f.dim();
    let diff = |arr: &Array2<f64>, y: usize, x: usize, axis: u8| -> f64 {
        match axis {
            0 => {
                // d/dx
                if x == 0 {
                    arr[[y, 1]] - arr[[y, 0]]
                } else if x == w - 1 {
                    arr[[y, w - 1]] - arr[[y, w - 2]]
                } else {
                    (arr[[y, x + 1]] - arr[[y, x - 1]]) * 0.5
                }
            }
            _ => {
                // d/dy
                if y == 0 {
                    arr[[1, x]] - arr[[0, x]]
                } else if y == h - 1 {
                    arr[[h - 1, x]] - arr[[h - 2, x]]
                } else {
                    (arr[[y + 1, x]] - arr[[y - 1, x]]) * 0.5
                }
            }
        }
    };
    let g = Array2::from_shape_fn((h, w), |(y, x)| {
        let ux = diff(&f.u, y, x, 0);
        let uy = diff(&f.u, y, x, 1);
        let vx = diff(&f.v, y, x, 0);
        let vy = diff(&f.v, y, x, 1);
        (ux * ux + uy * uy).sqrt().max((vx * vx + vy * vy).sqrt())
    });
    Ok(MotionGradientMap { g })
}

/// Pointwise maximum of motion-gradient maps.
pub fn boundary_from_gradients(maps: &[MotionGradientMap]) -> Result<Array2<f64>> {
    let first = maps.first().ok_or_else(|| Error::data("no gradient maps".to_string()))?;
    let dim = first.g.dim();
    if maps.iter().any(|m| m.g.dim() != dim) {
        return Err(Error::shape("gradient maps differ in size".to_string()));
    }
    let mut m = first.g.clone();
    for gm in &maps[1..] {
        ndarray::Zip::from(&mut m).and(&gm.g).for_each(|a, &b| *a = a.max(b));
    }
    Ok(m)
}

/// Stabilize three consecutive frames to the middle one and compute the
/// motion boundary map `max(G(0->1), G(1->2), G(2->1), G(1->0))`.
/// Stabilization warps frames 0 and 2 into frame-1 coordinates, so all
/// four flows and their gradients live on the common frame-1 grid.
pub fn motion_boundary(
    frames: &[GrayImage; 3],
    source_frame_index: usize,
    stab_params: &StabilizeParams,
    flow_params: &FlowParams,
) -> Result<MotionBoundaryMap> {
    let stab = stabilize(frames.as_slice(), 1, stab_params)?;
    let f01 = flow(&stab.frames[0], &stab.frames[1], flow_params)?;
    let f12 = flow(&stab.frames[1], &stab.frames[2], flow_params)?;
    let f21 = flow(&stab.frames[2], &stab.frames[1], flow_params)?;
    let f10 = flow(&stab.frames[1], &stab.frames[0], flow_params)?;
    let maps = [
        motion_gradient(&f01)?,
        motion_gradient(&f12)?,
        motion_gradient(&f21)?,
        motion_gradient(&f10)?,
    ];
    let m = boundary_from_gradients(&maps)?;
    let (h, w) = m.dim();
    let joint = Mask::from_shape_fn((h, w), |(y, x)| {
        stab.valid.iter().all(|v| v[[y, x]])
    });
    // flow smoothing leaks a few pixels of contamination inward from
    // invalid borders; shrink the trusted area accordingly
    let valid = erode_ellipse(&joint, 2, 2, 1);
    Ok(MotionBoundaryMap {
        m,
        source_frame_index,
        valid,
        stabilization_fallback: stab.fallback.iter().any(|&f| f),
    })
}

/// Box size limits learned from training annotations, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeLimits {
    pub min_w: f64,
    pub min_h: f64,
    pub max_w: f64,
    pub max_h: f64,
}

impl SizeLimits {
    /// The published minimum/maximum drone extents of the NPS recordings.
    pub fn nps() -> Self {
        SizeLimits { min_w: 10.0, min_h: 8.0, max_w: 65.0, max_h: 21.0 }
    }

    pub fn from_annotations(sets: &[crate::data::AnnotationSet]) -> Option<Self> {
        let mut lims: Option<SizeLimits> = None;
        for set in sets {
            for (_, boxes) in set.annotated_frames() {
                for b in boxes {
                    let l = lims.get_or_insert(SizeLimits {
                        min_w: f64::INFINITY,
                        min_h: f64::INFINITY,
                        max_w: 0.0,
                        max_h: 0.0,
                    });
                    l.min_w = l.min_w.min(b.width());
                    l.min_h = l.min_h.min(b.height());
                    l.max_w = l.max_w.max(b.width());
                    l.max_h = l.max_h.max(b.height());
                }
            }
        }
        lims
    }

    /// Accept a box, allowing `slack` times the max on the upper side.
    pub fn accepts(&self, b: &BoundingBox, slack: f64) -> bool {
        b.width() >= self.min_w
            && b.height() >= self.min_h
            && b.width() <= self.max_w * slack
            && b.height() <= self.max_h * slack
    }
}

#[derive(Debug, Clone)]
pub struct CandidateParams {
    /// Percentile of the valid-interior boundary values used as threshold.
    pub percentile: f64,
    /// Absolute floor under which the scene counts as static.
    pub floor: f64,
    /// Elliptical dilation radius and iteration count.
    pub dilate_radius: usize,
    pub dilate_iterations: usize,
    /// Border ring excluded from statistics (warping invalidates borders).
    pub border_margin: usize,
    /// Upper-size slack factor.
    pub max_size_slack: f64,
}

impl Default for CandidateParams {
    fn default() -> Self {
        CandidateParams {
            percentile: 99.5,
            floor: 0.25,
            dilate_radius: 2,
            dilate_iterations: 2,
            border_margin: 4,
            max_size_slack: 1.5,
        }
    }
}

/// Region-support refinement hook. The default implementation grows the
/// support to color-consistent pixels and shrinks to the largest consistent
/// component; a dense-CRF implementation can be plugged in here.
pub trait CandidateRefiner: Send + Sync {
    fn refine(&self, support: &Mask, frame: &RgbImage) -> Mask;
}

/// Pass-through refiner.
pub struct NoRefine;

impl CandidateRefiner for NoRefine {
    fn refine(&self, support: &Mask, _frame: &RgbImage) -> Mask {
        support.clone()
    }
}

/// Appearance-consistency refinement: fill holes in the support, estimate
/// the interior color distribution, grow to pixels within a Mahalanobis
/// threshold inside a window around the support, and keep the largest
/// consistent component that still touches the original support.
pub struct MahalanobisRefiner {
    pub threshold: f64,
    pub window_margin: usize,
}

impl Default for MahalanobisRefiner {
    fn default() -> Self {
        MahalanobisRefiner { threshold: 12.0, window_margin: 4 }
    }
}

impl CandidateRefiner for MahalanobisRefiner {
    fn refine(&self, support: &Mask, frame: &RgbImage) -> Mask {
        let (h, w) = support.dim();
        let filled = fill_holes(support);
        let interior = {
            let eroded = erode_ellipse(&filled, 1, 1, 1);
            if eroded.iter().any(|&v| v) {
                eroded
            } else {
                filled.clone()
            }
        };
        // interior color statistics
        let mut n = 0.0;
        let mut mean = [0.0f64; 3];
        for y in 0..h {
            for x in 0..w {
                if interior[[y, x]] {
                    for c in 0..3 {
                        mean[c] += frame[[c, y, x]];
                    }
                    n += 1.0;
                }
            }
        }
        if n < 1.0 {
            return filled;
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for y in 0..h {
            for x in 0..w {
                if interior[[y, x]] {
                    let d = nalgebra::Vector3::new(
                        frame[[0, y, x]] - mean[0],
                        frame[[1, y, x]] - mean[1],
                        frame[[2, y, x]] - mean[2],
                    );
                    cov += d * d.transpose();
                }
            }
        }
        cov /= n;
        cov += nalgebra::Matrix3::identity() * 1e-4;
        let Some(cov_inv) = cov.try_inverse() else {
            return filled;
        };
        // window around the support
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                if filled[[y, x]] {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        let m = self.window_margin;
        let x1 = x1.saturating_sub(m);
        let y1 = y1.saturating_sub(m);
        let x2 = (x2 + m).min(w);
        let y2 = (y2 + m).min(h);
        let mut consistent = Mask::from_elem((h, w), false);
        for y in y1..y2 {
            for x in x1..x2 {
                let d = nalgebra::Vector3::new(
                    frame[[0, y, x]] - mean[0],
                    frame[[1, y, x]] - mean[1],
                    frame[[2, y, x]] - mean[2],
                );
                if (d.transpose() * cov_inv * d)[(0, 0)] <= self.threshold {
                    consistent[[y, x]] = true;
                }
            }
        }
        let (labels, count) = connected_components(&consistent);
        if count == 0 {
            return filled;
        }
        // largest component intersecting the original support
        let mut sizes = vec![0usize; count];
        let mut touches = vec![false; count];
        for y in 0..h {
            for x in 0..w {
                let l = labels[[y, x]];
                if l > 0 {
                    sizes[(l - 1) as usize] += 1;
                    if filled[[y, x]] {
                        touches[(l - 1) as usize] = true;
                    }
                }
            }
        }
        let best = (0..count)
            .filter(|&i| touches[i])
            .max_by_key(|&i| sizes[i]);
        let Some(best) = best else { return filled };
        Mask::from_shape_fn((h, w), |(y, x)| labels[[y, x]] == (best + 1) as u32)
    }
}

fn percentile_threshold(values: &mut Vec<f64>, q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q / 100.0) * (values.len() - 1) as f64).round() as usize;
    Some(values[idx.min(values.len() - 1)])
}

/// Extract candidate boxes from a motion boundary map: threshold at the
/// configured percentile of valid-interior values (with an absolute
/// floor), dilate, refine per-component support against the middle frame's
/// appearance, and keep tight component boxes within the size limits.
pub fn extract_candidates(
    mb: &MotionBoundaryMap,
    middle_frame: &RgbImage,
    size_limits: &SizeLimits,
    params: &CandidateParams,
    refiner: &dyn CandidateRefiner,
) -> Result<Vec<BoundingBox>> {
    let (h, w) = mb.m.dim();
    let margin = params.border_margin;
    if h <= 2 * margin || w <= 2 * margin {
        return Ok(Vec::new());
    }
    let mut interior_vals = Vec::with_capacity((h - 2 * margin) * (w - 2 * margin));
    for y in margin..h - margin {
        for x in margin..w - margin {
            if mb.valid[[y, x]] {
                interior_vals.push(mb.m[[y, x]]);
            }
        }
    }
    let Some(p) = percentile_threshold(&mut interior_vals, params.percentile) else {
        return Ok(Vec::new());
    };
    let thresh = p.max(params.floor);
    let mut binary = Mask::from_elem((h, w), false);
    let mut any = false;
    for y in margin..h - margin {
        for x in margin..w - margin {
            if mb.valid[[y, x]] && mb.m[[y, x]] >= thresh {
                binary[[y, x]] = true;
                any = true;
            }
        }
    }
    if !any {
        return Ok(Vec::new());
    }
    let dilated = dilate_ellipse(&binary, params.dilate_radius, params.dilate_radius, params.dilate_iterations);
    let (labels, count) = connected_components(&dilated);
    let mut out = Vec::new();
    for i in 0..count {
        let comp = Mask::from_shape_fn((h, w), |(y, x)| labels[[y, x]] == (i + 1) as u32);
        let refined = refiner.refine(&comp, middle_frame);
        let use_mask = if refined.iter().any(|&v| v) { refined } else { comp };
        let (l2, c2) = connected_components(&use_mask);
        if c2 == 0 {
            continue;
        }
        // refinement returns a single component, but guard anyway
        let boxes = component_boxes(&l2, c2);
        let (b, _) = boxes
            .into_iter()
            .max_by_key(|(_, area)| *area)
            .expect("non-empty mask has components");
        if size_limits.accepts(&b, params.max_size_slack) {
            out.push(b);
        }
    }
    // deterministic order
    out.sort_by(|a, b| {
        a.x1.partial_cmp(&b.x1)
            .unwrap()
            .then(a.y1.partial_cmp(&b.y1).unwrap())
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_flow(seed: u64, h: usize, w: usize) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlowField {
            u: Array2::from_shape_fn((h, w), |_| rng.gen_range(-3.0..3.0)),
            v: Array2::from_shape_fn((h, w), |_| rng.gen_range(-3.0..3.0)),
        }
    }

    /// Independent per-pixel recomputation of the motion gradient.
    fn gradient_oracle(f: &FlowField) -> Array2<f64> {
        let (h, w) = f.dim();
        let d = |arr: &Array2<f64>, y: isize, x: isize| -> f64 {
            arr[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]]
        };
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (yi, xi) = (y as isize, x as isize);
            let ux = if x == 0 || x == w - 1 {
                if x == 0 { d(&f.u, yi, 1) - d(&f.u, yi, 0) } else { d(&f.u, yi, xi) - d(&f.u, yi, xi - 1) }
            } else {
                (d(&f.u, yi, xi + 1) - d(&f.u, yi, xi - 1)) / 2.0
            };
            let uy = if y == 0 || y == h - 1 {
                if y == 0 { d(&f.u, 1, xi) - d(&f.u, 0, xi) } else { d(&f.u, yi, xi) - d(&f.u, yi - 1, xi) }
            } else {
                (d(&f.u, yi + 1, xi) - d(&f.u, yi - 1, xi)) / 2.0
            };
            let vx = if x == 0 || x == w - 1 {
                if x == 0 { d(&f.v, yi, 1) - d(&f.v, yi, 0) } else { d(&f.v, yi, xi) - d(&f.v, yi, xi - 1) }
            } else {
                (d(&f.v, yi, xi + 1) - d(&f.v, yi, xi - 1)) / 2.0
            };
            let vy = if y == 0 || y == h - 1 {
                if y == 0 { d(&f.v, 1, xi) - d(&f.v, 0, xi) } else { d(&f.v, yi, xi) - d(&f.v, yi - 1, xi) }
            } else {
                (d(&f.v, yi + 1, xi) - d(&f.v, yi - 1, xi)) / 2.0
            };
            f64::max((ux * ux + uy * uy).sqrt(), (vx * vx + vy * vy).sqrt())
        })
    }

    #[test]
    fn constant_flow_zero_gradient() {
        let f = FlowField {
            u: Array2::from_elem((20, 30), 2.5),
            v: Array2::from_elem((20, 30), -1.5),
        };
        let g = motion_gradient(&f).unwrap();
        assert!(g.g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_flow_gradients() {
        // u = 2x -> G = 2 on the interior
        let f = FlowField {
            u: Array2::from_shape_fn((16, 16), |(_, x)| 2.0 * x as f64),
            v: Array2::zeros((16, 16)),
        };
        let g = motion_gradient(&f).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                assert_abs_diff_eq!(g.g[[y, x]], 2.0, epsilon = 1e-9);
            }
        }
        // v = 3y -> G = 3 on the interior (second branch of the max)
        let f = FlowField {
            u: Array2::zeros((16, 16)),
            v: Array2::from_shape_fn((16, 16), |(y, _)| 3.0 * y as f64),
        };
        let g = motion_gradient(&f).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                assert_abs_diff_eq!(g.g[[y, x]], 3.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_oracle_on_random_flows() {
        for seed in 0..20 {
            let f = rand_flow(seed, 12, 14);
            let g = motion_gradient(&f).unwrap();
            let want = gradient_oracle(&f);
            for (a, b) in g.g.iter().zip(want.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gradient_invariant_to_constant_offset() {
        let f = rand_flow(42, 10, 10);
        let g0 = motion_gradient(&f).unwrap();
        let f2 = FlowField { u: &f.u + 7.5, v: &f.v - 3.25 };
        let g1 = motion_gradient(&f2).unwrap();
        for (a, b) in g0.g.iter().zip(g1.g.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn boundary_max_dominance() {
        let flows: Vec<FlowField> = (0..4).map(|s| rand_flow(s + 100, 12, 12)).collect();
        let maps: Vec<MotionGradientMap> = flows.iter().map(|f| motion_gradient(f).unwrap()).collect();
        let m = boundary_from_gradients(&maps).unwrap();
        for gm in &maps {
            for (a, b) in m.iter().zip(gm.g.iter()) {
                assert!(a >= b, "M < G somewhere");
            }
        }
        // M equals at least one contributing G everywhere
        for y in 0..12 {
            for x in 0..12 {
                let v = m[[y, x]];
                assert!(maps.iter().any(|gm| (gm.g[[y, x]] - v).abs() < 1e-15));
            }
        }
    }

    fn textured_rgb(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.3..0.7))
    }

    #[test]
    fn identical_triple_boundary_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Array2::from_shape_fn((72, 96), |_| rng.gen_range(0.0..1.0));
        let f = crate::imgproc::gaussian_blur(&noise, 1.2);
        let mb = motion_boundary(
            &[f.clone(), f.clone(), f.clone()],
            1,
            &StabilizeParams::default(),
            &FlowParams::default(),
        )
        .unwrap();
        for (v, ok) in mb.m.iter().zip(mb.valid.iter()) {
            if *ok {
                assert!(*v < 0.1, "boundary {v} on static scene");
            }
        }
    }

    #[test]
    fn zero_boundary_map_gives_no_candidates() {
        let mb = MotionBoundaryMap {
            m: Array2::zeros((64, 64)),
            source_frame_index: 1,
            valid: Mask::from_elem((64, 64), true),
            stabilization_fallback: false,
        };
        let frame = textured_rgb(1, 64, 64);
        let out = extract_candidates(
            &mb,
            &frame,
            &SizeLimits { min_w: 4.0, min_h: 4.0, max_w: 30.0, max_h: 30.0 },
            &CandidateParams::default(),
            &NoRefine,
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn oversized_component_rejected() {
        // a 200x200 hot region with NPS limits must be filtered out
        let (h, w) = (256, 256);
        let mut m = Array2::zeros((h, w));
        for y in 20..220 {
            for x in 20..220 {
                m[[y, x]] = 5.0;
            }
        }
        let mb = MotionBoundaryMap {
            m,
            source_frame_index: 0,
            valid: Mask::from_elem((h, w), true),
            stabilization_fallback: false,
        };
        let frame = textured_rgb(2, h, w);
        let out = extract_candidates(&mb, &frame, &SizeLimits::nps(), &CandidateParams::default(), &NoRefine).unwrap();
        assert!(out.is_empty(), "got {out:?}");
    }

    #[test]
    fn candidate_box_sizes_always_within_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lims = SizeLimits { min_w: 5.0, min_h: 5.0, max_w: 40.0, max_h: 40.0 };
        for seed in 0..10 {
            let m = Array2::from_shape_fn((96, 96), |_| {
                if rng.gen_bool(0.02) { rng.gen_range(1.0..4.0) } else { 0.0 }
            });
            let mb = MotionBoundaryMap {
                m,
                source_frame_index: 0,
                valid: Mask::from_elem((96, 96), true),
                stabilization_fallback: false,
            };
            let frame = textured_rgb(seed + 10, 96, 96);
            let out = extract_candidates(&mb, &frame, &lims, &CandidateParams::default(), &NoRefine).unwrap();
            for b in out {
                assert!(lims.accepts(&b, 1.5));
            }
        }
    }
}
