//! Dense optical flow. The estimator is a contract: anything that passes
//! the synthetic-shift tolerances is admissible. The reference
//! implementation is coarse-to-fine Horn-Schunck with iterative warping.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imgproc::{downsample_half, resize_bilinear, sample_bilinear, GrayImage};

/// Per-pixel displacement between two frames: `u` along x, `v` along y.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { u: Array2::zeros((h, w)), v: Array2::zeros((h, w)) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.dim() != self.v.dim() {
            return Err(Error::shape("flow u/v dimensions differ".to_string()));
        }
        if self.u.iter().chain(self.v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::numerical("flow field contains non-finite values".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowParams {
    /// Horn-Schunck smoothness weight (intensities in [0, 1]).
    pub alpha: f64,
    /// Jacobi iterations per warp.
    pub iterations: usize,
    /// Warp/linearization passes per pyramid level.
    pub warps: usize,
    /// Stop building the pyramid below this side length.
    pub min_level_size: usize,
    pub max_levels: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { alpha: 0.02, iterations: 80, warps: 2, min_level_size: 24, max_levels: 4 }
    }
}

fn pyramid(img: &GrayImage, params: &FlowParams) -> Vec<GrayImage> {
    let mut levels = vec![img.clone()];
    while levels.len() < params.max_levels {
        let last = levels.last().unwrap();
        let (h, w) = last.dim();
        if h / 2 < params.min_level_size || w / 2 < params.min_level_size {
            break;
        }
        levels.push(downsample_half(last));
    }
    levels
}

/// Weighted 8-neighbor average used by the Horn-Schunck update.
fn neighbor_average(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        f[[y, x]]
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0
            + (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0
    })
}

fn central_diff_x(img: &GrayImage) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if x == 0 {
            img[[y, 1]] - img[[y, 0]]
        } else if x == w - 1 {
            img[[y, w - 1]] - img[[y, w - 2]]
        } else {
            (img[[y, x + 1]] - img[[y, x - 1]]) * 0.5
        }
    })
}

fn central_diff_y(img: &GrayImage) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if y == 0 {
            img[[1, x]] - img[[0, x]]
        } else if y == h - 1 {
            img[[h - 1, x]] - img[[h - 2, x]]
        } else {
            (img[[y + 1, x]] - img[[y - 1, x]]) * 0.5
        }
    })
}

fn hs_level(a: &GrayImage, b: &GrayImage, mut u: Array2<f64>, mut v: Array2<f64>, params: &FlowParams) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = a.dim();
    let alpha2 = params.alpha * params.alpha;
    for _ in 0..params.warps {
        // warp b by the current flow and linearize around it
        let bw = Array2::from_shape_fn((h, w), |(y, x)| {
            sample_bilinear(b, x as f64 + u[[y, x]], y as f64 + v[[y, x]])
        });
        let ix_a = central_diff_x(a);
        let iy_a = central_diff_y(a);
        let ix_b = central_diff_x(&bw);
        let iy_b = central_diff_y(&bw);
        let ix = Array2::from_shape_fn((h, w), |i| 0.5 * (ix_a[i] + ix_b[i]));
        let iy = Array2::from_shape_fn((h, w), |i| 0.5 * (iy_a[i] + iy_b[i]));
        // constant term so the constraint reads Ix*u + Iy*v + c = 0 for the
        // total flow (residual measured at the linearization point u0, v0)
        let c = Array2::from_shape_fn((h, w), |i| bw[i] - a[i] - ix[i] * u[i] - iy[i] * v[i]);
        for _ in 0..params.iterations {
            let ubar = neighbor_average(&u);
            let vbar = neighbor_average(&v);
            for y in 0..h {
                for x in 0..w {
                    let i = (y, x);
                    let t = (ix[i] * ubar[i] + iy[i] * vbar[i] + c[i]) / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    u[i] = ubar[i] - ix[i] * t;
                    v[i] = vbar[i] - iy[i] * t;
                }
            }
        }
    }
    (u, v)
}

/// Dense flow from `a` to `b` (same size, stabilized, intensities [0, 1]).
pub fn flow(a: &GrayImage, b: &GrayImage, params: &FlowParams) -> Result<FlowField> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "flow: frame sizes differ ({:?} vs {:?})",
            a.dim(),
            b.dim()
        )));
    }
    let pa = pyramid(a, params);
    let pb = pyramid(b, params);
    let coarsest = pa.len() - 1;
    let (ch, cw) = pa[coarsest].dim();
    let mut u = Array2::zeros((ch, cw));
    let mut v = Array2::zeros((ch, cw));
    for level in (0..=coarsest).rev() {
        let (lh, lw) = pa[level].dim();
        if u.dim() != (lh, lw) {
            u = resize_bilinear(&u, lh, lw) * 2.0;
            v = resize_bilinear(&v, lh, lw) * 2.0;
        }
        let (nu, nv) = hs_level(&pa[level], &pb[level], u, v, params);
        u = nu;
        v = nv;
    }
    let f = FlowField { u, v };
    f.validate()?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(seed: u64, h: usize, w: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..1.0));
        crate::imgproc::gaussian_blur(&noise, 1.5)
    }

    fn interior_mean(f: &Array2<f64>, margin: usize) -> f64 {
        let (h, w) = f.dim();
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                acc += f[[y, x]];
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn identical_frames_zero_flow() {
        let a = textured(1, 80, 96);
        let f = flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(interior_mean(&f.u.mapv(f64::abs), 4) < 0.1);
        assert!(interior_mean(&f.v.mapv(f64::abs), 4) < 0.1);
    }

    #[test]
    fn three_pixel_shift_recovered() {
        let a = textured(2, 96, 128);
        let (h, w) = a.dim();
        let b = Array2::from_shape_fn((h, w), |(y, x)| {
            let sx = (x as isize - 3).clamp(0, w as isize - 1) as usize;
            a[[y, sx]]
        });
        let f = flow(&a, &b, &FlowParams::default()).unwrap();
        let mu = interior_mean(&f.u, 8);
        let mv = interior_mean(&f.v, 8);
        assert!((mu - 3.0).abs() < 0.5, "mean u {mu}");
        assert!(mv.abs() < 0.5, "mean v {mv}");
    }

    #[test]
    fn forward_backward_consistency() {
        let a = textured(3, 96, 128);
        let (h, w) = a.dim();
        let b = Array2::from_shape_fn((h, w), |(y, x)| {
            let sx = (x as isize - 2).clamp(0, w as isize - 1) as usize;
            let sy = (y as isize - 1).clamp(0, h as isize - 1) as usize;
            a[[sy, sx]]
        });
        let fab = flow(&a, &b, &FlowParams::default()).unwrap();
        let fba = flow(&b, &a, &FlowParams::default()).unwrap();
        // compose: x + fab(x) + fba(x + fab(x)) should return to x
        let mut total = 0.0;
        let mut n = 0;
        for y in (10..86).step_by(4) {
            for x in (10..118).step_by(4) {
                let (ux, vy) = (fab.u[[y, x]], fab.v[[y, x]]);
                let bx = x as f64 + ux;
                let by = y as f64 + vy;
                let ub = sample_bilinear(&fba.u, bx, by);
                let vb = sample_bilinear(&fba.v, bx, by);
                total += ((ux + ub).powi(2) + (vy + vb).powi(2)).sqrt();
                n += 1;
            }
        }
        let mean = total / n as f64;
        assert!(mean < 1.0, "forward-backward error {mean}");
    }
}
