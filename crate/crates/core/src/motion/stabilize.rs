//! Frame stabilization: Harris corner detection, patch descriptor matching,
//! RANSAC homography fitting, and warping into a reference frame.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgproc::raster::Mask;
use crate::imgproc::{sample_bilinear, GrayImage, RgbImage};

/// 3x3 planar homography, normalized so `h33 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::numerical(format!("homography is singular (det {det})")));
        }
        let h33 = m[(2, 2)];
        if h33.abs() < 1e-12 {
            return Err(Error::numerical("homography h33 ~ 0, cannot normalize".to_string()));
        }
        Ok(Homography(m / h33))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Homography(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }

    pub fn inverse(&self) -> Result<Homography> {
        self.0
            .try_inverse()
            .ok_or_else(|| Error::numerical("homography not invertible".to_string()))
            .and_then(Homography::from_matrix)
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.0 * other.0)
    }

    /// Largest deviation from the identity matrix, elementwise.
    pub fn deviation_from_identity(&self) -> f64 {
        (self.0 - Matrix3::identity()).abs().max()
    }
}

#[derive(Debug, Clone)]
pub struct StabilizeParams {
    pub max_corners: usize,
    pub nms_radius: usize,
    /// Patch descriptor half-size (descriptor is (2r+1)^2).
    pub descriptor_radius: usize,
    /// Minimum normalized correlation for a match.
    pub min_match_score: f64,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    /// Below this many inliers the frame falls back to the identity
    /// homography and is flagged.
    pub min_inliers: usize,
}

impl Default for StabilizeParams {
    fn default() -> Self {
        StabilizeParams {
            max_corners: 300,
            nms_radius: 4,
            descriptor_radius: 5,
            min_match_score: 0.6,
            ransac_iterations: 600,
            inlier_threshold: 2.0,
            min_inliers: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Corner {
    x: f64,
    y: f64,
}

/// Harris corners with non-maximum suppression and parabolic subpixel
/// refinement, strongest first, capped at `max_corners`.
fn harris_corners(img: &GrayImage, params: &StabilizeParams) -> Vec<Corner> {
    let (h, w) = img.dim();
    if h < 12 || w < 12 {
        return Vec::new();
    }
    let mut ix = GrayImage::zeros((h, w));
    let mut iy = GrayImage::zeros((h, w));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            ix[[y, x]] = (img[[y, x + 1]] - img[[y, x - 1]]) * 0.5;
            iy[[y, x]] = (img[[y + 1, x]] - img[[y - 1, x]]) * 0.5;
        }
    }
    // structure tensor smoothed with a small box window
    let r = 2usize;
    let mut response = GrayImage::zeros((h, w));
    for y in r..h - r {
        for x in r..w - r {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for dy in 0..=2 * r {
                for dx in 0..=2 * r {
                    let gx = ix[[y + dy - r, x + dx - r]];
                    let gy = iy[[y + dy - r, x + dx - r]];
                    sxx += gx * gx;
                    syy += gy * gy;
                    sxy += gx * gy;
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            response[[y, x]] = det - 0.06 * tr * tr;
        }
    }
    let max_resp = response.iter().cloned().fold(0.0f64, f64::max);
    if max_resp <= 0.0 {
        return Vec::new();
    }
    let floor = 0.005 * max_resp;
    let nms = params.nms_radius as isize;
    let margin = (params.descriptor_radius + 1).max(r + 1);
    let mut found: Vec<(f64, Corner)> = Vec::new();
    for y in margin..h - margin {
        'pixel: for x in margin..w - margin {
            let v = response[[y, x]];
            if v < floor {
                continue;
            }
            for dy in -nms..=nms {
                for dx in -nms..=nms {
                    let ny = (y as isize + dy) as usize;
                    let nx = (x as isize + dx) as usize;
                    if ny < h && nx < w && response[[ny, nx]] > v {
                        continue 'pixel;
                    }
                }
            }
            // parabolic subpixel refinement along each axis
            let refine = |m1: f64, c: f64, p1: f64| -> f64 {
                let denom = m1 - 2.0 * c + p1;
                if denom.abs() < 1e-12 {
                    0.0
                } else {
                    (0.5 * (m1 - p1) / denom).clamp(-0.5, 0.5)
                }
            };
            let dx = refine(response[[y, x - 1]], v, response[[y, x + 1]]);
            let dy = refine(response[[y - 1, x]], v, response[[y + 1, x]]);
            found.push((v, Corner { x: x as f64 + dx, y: y as f64 + dy }));
        }
    }
    found.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    found.truncate(params.max_corners);
    found.into_iter().map(|(_, c)| c).collect()
}

/// Zero-mean, unit-norm patch descriptor at a corner.
fn describe(img: &GrayImage, c: &Corner, radius: usize) -> Option<Vec<f64>> {
    let (h, w) = img.dim();
    let cx = c.x.round() as isize;
    let cy = c.y.round() as isize;
    let r = radius as isize;
    if cx - r < 0 || cy - r < 0 || cx + r >= w as isize || cy + r >= h as isize {
        return None;
    }
    let n = (2 * radius + 1).pow(2);
    let mut d = Vec::with_capacity(n);
    for dy in -r..=r {
        for dx in -r..=r {
            d.push(img[[(cy + dy) as usize, (cx + dx) as usize]]);
        }
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    for v in &mut d {
        *v -= mean;
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    for v in &mut d {
        *v /= norm;
    }
    Some(d)
}

/// Mutual-best normalized-correlation matching between two corner sets.
fn match_corners(
    img_a: &GrayImage,
    img_b: &GrayImage,
    corners_a: &[Corner],
    corners_b: &[Corner],
    params: &StabilizeParams,
) -> Vec<((f64, f64), (f64, f64))> {
    let desc_a: Vec<Option<Vec<f64>>> = corners_a.iter().map(|c| describe(img_a, c, params.descriptor_radius)).collect();
    let desc_b: Vec<Option<Vec<f64>>> = corners_b.iter().map(|c| describe(img_b, c, params.descriptor_radius)).collect();

    let score = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let best_for = |from: &[Option<Vec<f64>>], to: &[Option<Vec<f64>>], i: usize| -> Option<(usize, f64)> {
        let da = from[i].as_ref()?;
        let mut best: Option<(usize, f64)> = None;
        for (j, db) in to.iter().enumerate() {
            let Some(db) = db else { continue };
            let s = score(da, db);
            if best.map(|(_, bs)| s > bs).unwrap_or(true) {
                best = Some((j, s));
            }
        }
        best
    };

    let mut matches = Vec::new();
    for i in 0..corners_a.len() {
        let Some((j, s)) = best_for(&desc_a, &desc_b, i) else { continue };
        if s < params.min_match_score {
            continue;
        }
        // mutual-best consistency
        let Some((i_back, _)) = best_for(&desc_b, &desc_a, j) else { continue };
        if i_back != i {
            continue;
        }
        matches.push(((corners_a[i].x, corners_a[i].y), (corners_b[j].x, corners_b[j].y)));
    }
    matches
}

/// Hartley-normalized direct linear transform for >= 4 correspondences.
fn dlt_homography(pairs: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::numerical("DLT needs at least 4 correspondences".to_string()));
    }
    let normalize = |pts: Vec<(f64, f64)>| -> (Matrix3<f64>, Vec<(f64, f64)>) {
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        let (mx, my) = (mx / n, my / n);
        let mean_dist = pts
            .iter()
            .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
            .sum::<f64>()
            / n;
        let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
        let t = Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0);
        let out = pts.iter().map(|p| (s * (p.0 - mx), s * (p.1 - my))).collect();
        (t, out)
    };
    let (t_src, src) = normalize(pairs.iter().map(|p| p.0).collect());
    let (t_dst, dst) = normalize(pairs.iter().map(|p| p.1).collect());

    let mut a = DMatrix::zeros(2 * pairs.len(), 9);
    for (k, (s, d)) in src.iter().zip(dst.iter()).enumerate() {
        let (x, y) = *s;
        let (xp, yp) = *d;
        let r0 = 2 * k;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = x * xp;
        a[(r0, 7)] = y * xp;
        a[(r0, 8)] = xp;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = x * yp;
        a[(r1, 7)] = y * yp;
        a[(r1, 8)] = yp;
    }
    // null vector of A via the smallest eigenpair of A^T A (the thin SVD of
    // a 2n x 9 matrix does not expose the 9th right singular vector)
    let ata = a.transpose() * &a;
    let eig = nalgebra::SymmetricEigen::new(ata);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    let hvec = eig.eigenvectors.column(best);
    let hn = Matrix3::new(
        hvec[0], hvec[1], hvec[2], hvec[3], hvec[4], hvec[5], hvec[6], hvec[7], hvec[8],
    );
    let h = t_dst.try_inverse().unwrap() * hn * t_src;
    Homography::from_matrix(h)
}

/// RANSAC over correspondences; returns the refit homography and inlier
/// count, or None when no sample reaches `min_inliers`.
fn ransac_homography(
    matches: &[((f64, f64), (f64, f64))],
    params: &StabilizeParams,
) -> Option<(Homography, usize)> {
    if matches.len() < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5744_1b02);
    let thr2 = params.inlier_threshold * params.inlier_threshold;
    let inliers_of = |h: &Homography| -> Vec<usize> {
        matches
            .iter()
            .enumerate()
            .filter(|(_, (s, d))| {
                let (px, py) = h.apply(s.0, s.1);
                (px - d.0).powi(2) + (py - d.1).powi(2) < thr2
            })
            .map(|(i, _)| i)
            .collect()
    };
    let mut best: Option<(Vec<usize>, Homography)> = None;
    for _ in 0..params.ransac_iterations {
        let mut idx = [0usize; 4];
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..matches.len());
        }
        if idx.iter().collect::<std::collections::BTreeSet<_>>().len() < 4 {
            continue;
        }
        let sample: Vec<_> = idx.iter().map(|&i| matches[i]).collect();
        // reject nearly-degenerate samples
        let min_spread = sample
            .iter()
            .enumerate()
            .flat_map(|(i, a)| sample.iter().skip(i + 1).map(move |b| {
                ((a.0 .0 - b.0 .0).powi(2) + (a.0 .1 - b.0 .1).powi(2)).sqrt()
            }))
            .fold(f64::INFINITY, f64::min);
        if min_spread < 4.0 {
            continue;
        }
        let Ok(h) = dlt_homography(&sample) else { continue };
        let inl = inliers_of(&h);
        if best.as_ref().map(|(bi, _)| inl.len() > bi.len()).unwrap_or(true) {
            best = Some((inl, h));
        }
    }
    let (inl, _) = best?;
    if inl.len() < params.min_inliers {
        return None;
    }
    // least-squares refit on all inliers, then re-score
    let subset: Vec<_> = inl.iter().map(|&i| matches[i]).collect();
    let refit = dlt_homography(&subset).ok()?;
    let count = inliers_of(&refit).len();
    Some((refit, count))
}

/// Inverse-warp a grayscale image into the reference grid of `h_to_ref`.
/// Returns the warped image and a validity mask (false where the source
/// sample fell outside the frame).
pub fn warp_homography(img: &GrayImage, h_to_ref: &Homography, out_h: usize, out_w: usize) -> Result<(GrayImage, Mask)> {
    let inv = h_to_ref.inverse()?;
    let (h, w) = img.dim();
    let mut out = GrayImage::zeros((out_h, out_w));
    let mut valid = Mask::from_elem((out_h, out_w), false);
    // out-of-bounds samples replicate the border instead of going to zero:
    // a hard zero edge would fabricate image gradients right where the
    // warp is least trustworthy
    let eps = 1e-6;
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            out[[y, x]] = sample_bilinear(img, sx, sy);
            if sx >= -eps && sy >= -eps && sx <= (w - 1) as f64 + eps && sy <= (h - 1) as f64 + eps {
                valid[[y, x]] = true;
            }
        }
    }
    Ok((out, valid))
}

/// Per-channel homography warp of a color frame.
pub fn warp_homography_rgb(img: &RgbImage, h_to_ref: &Homography, out_h: usize, out_w: usize) -> Result<(RgbImage, Mask)> {
    let (c, _, _) = img.dim();
    let mut out = RgbImage::zeros((c, out_h, out_w));
    let mut valid = Mask::from_elem((out_h, out_w), true);
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        let (warped, v) = warp_homography(&plane, h_to_ref, out_h, out_w)?;
        out.index_axis_mut(ndarray::Axis(0), ch).assign(&warped);
        if ch == 0 {
            valid = v;
        }
    }
    Ok((out, valid))
}

/// Result of stabilizing a group of frames to a reference frame.
#[derive(Debug, Clone)]
pub struct Stabilization {
    /// Warped grayscale frames in reference coordinates.
    pub frames: Vec<GrayImage>,
    /// Per-frame homography mapping that frame's coordinates to the
    /// reference frame. The reference entry is the identity.
    pub homographies: Vec<Homography>,
    /// Warp validity masks.
    pub valid: Vec<Mask>,
    /// Set for frames where matching failed and the identity was used.
    pub fallback: Vec<bool>,
}

/// Estimate a homography from each frame to `frames[reference_index]` via
/// keypoint matching and RANSAC, then warp all frames into the reference
/// grid. Frames with too few inliers fall back to the identity and are
/// flagged.
pub fn stabilize(frames: &[GrayImage], reference_index: usize, params: &StabilizeParams) -> Result<Stabilization> {
    if frames.len() < 2 {
        return Err(Error::data("stabilize needs at least 2 frames".to_string()));
    }
    if reference_index >= frames.len() {
        return Err(Error::data(format!(
            "reference index {reference_index} out of range for {} frames",
            frames.len()
        )));
    }
    let (h, w) = frames[reference_index].dim();
    if frames.iter().any(|f| f.dim() != (h, w)) {
        return Err(Error::data("stabilize: frames must share dimensions".to_string()));
    }
    let ref_corners = harris_corners(&frames[reference_index], params);
    let mut homographies = Vec::with_capacity(frames.len());
    let mut warped = Vec::with_capacity(frames.len());
    let mut valid = Vec::with_capacity(frames.len());
    let mut fallback = vec![false; frames.len()];
    for (i, frame) in frames.iter().enumerate() {
        if i == reference_index {
            homographies.push(Homography::identity());
            warped.push(frame.clone());
            valid.push(Mask::from_elem((h, w), true));
            continue;
        }
        let corners = harris_corners(frame, params);
        let matches = match_corners(frame, &frames[reference_index], &corners, &ref_corners, params);
        let hom = match ransac_homography(&matches, params) {
            Some((hom, _)) => hom,
            None => {
                fallback[i] = true;
                Homography::identity()
            }
        };
        let (wf, vm) = warp_homography(frame, &hom, h, w)?;
        homographies.push(hom);
        warped.push(wf);
        valid.push(vm);
    }
    Ok(Stabilization { frames: warped, homographies, valid, fallback })
}
