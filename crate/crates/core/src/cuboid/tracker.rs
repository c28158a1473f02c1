//! MOSSE correlation-filter tracker. The filter is trained in the Fourier
//! domain on the seed patch and updated online as the track advances;
//! the response peak value serves as the tracking confidence.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imgproc::{sample_bilinear, GrayImage};

pub const FILTER_SIZE: usize = 64;

#[derive(Debug, Clone)]
pub struct TrackerParams {
    /// Patch side relative to the larger box side.
    pub padding: f64,
    /// Response-peak confidence below which the tracker reports drift.
    pub confidence_threshold: f64,
    /// Online adaptation rate.
    pub learning_rate: f64,
    /// Regularization added to the filter denominator.
    pub lambda: f64,
    /// Hard per-step displacement clamp in frame pixels.
    pub max_step: f64,
    /// Gaussian target peak width in filter pixels.
    pub sigma: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            padding: 2.0,
            confidence_threshold: 0.3,
            learning_rate: 0.125,
            lambda: 1e-4,
            max_step: 50.0,
            sigma: 2.0,
        }
    }
}

fn fft2(data: &Array2<Complex<f64>>, inverse: bool) -> Array2<Complex<f64>> {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut out = data.clone();
    for mut row in out.rows_mut() {
        let mut buf: Vec<Complex<f64>> = row.to_vec();
        row_fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(buf) {
            *dst = src;
        }
    }
    for x in 0..w {
        let mut buf: Vec<Complex<f64>> = (0..h).map(|y| out[[y, x]]).collect();
        col_fft.process(&mut buf);
        for (y, v) in buf.into_iter().enumerate() {
            out[[y, x]] = v;
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        out.mapv_inplace(|v| v * scale);
    }
    out
}

/// Sample a square window of side `side` centered at (cx, cy) into an
/// `out x out` grid, replicating borders.
fn subwindow(img: &GrayImage, cx: f64, cy: f64, side: f64, out: usize) -> Array2<f64> {
    Array2::from_shape_fn((out, out), |(y, x)| {
        let sx = cx + ((x as f64 + 0.5) / out as f64 - 0.5) * side;
        let sy = cy + ((y as f64 + 0.5) / out as f64 - 0.5) * side;
        sample_bilinear(img, sx, sy)
    })
}

fn cosine_window(n: usize) -> Array2<f64> {
    let hann: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| hann[y] * hann[x])
}

/// Log-normalize and window a raw patch.
fn preprocess(patch: &Array2<f64>, window: &Array2<f64>) -> Array2<Complex<f64>> {
    let logp = patch.mapv(|v| (1.0 + v.max(0.0)).ln());
    let mean = logp.mean().unwrap_or(0.0);
    let std = (logp.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0)).sqrt() + 1e-5;
    Array2::from_shape_fn(patch.dim(), |i| {
        Complex::new((logp[i] - mean) / std * window[i], 0.0)
    })
}

pub struct MosseTracker {
    params: TrackerParams,
    window: Array2<f64>,
    target_fft: Array2<Complex<f64>>,
    num: Array2<Complex<f64>>,
    den: Array2<Complex<f64>>,
    center: (f64, f64),
    patch_side: f64,
}

impl MosseTracker {
    /// Initialize at a seed box on the first frame of the track.
    pub fn init(frame: &GrayImage, seed_center: (f64, f64), seed_size: (f64, f64), params: &TrackerParams) -> Result<Self> {
        let (h, w) = frame.dim();
        if seed_center.0 < 0.0
            || seed_center.1 < 0.0
            || seed_center.0 >= w as f64
            || seed_center.1 >= h as f64
        {
            return Err(Error::data(format!(
                "tracker seed center ({}, {}) outside {w}x{h} frame",
                seed_center.0, seed_center.1
            )));
        }
        let patch_side = (seed_size.0.max(seed_size.1) * params.padding).max(8.0);
        let window = cosine_window(FILTER_SIZE);
        // Gaussian response target peaked at the patch center
        let c = FILTER_SIZE as f64 / 2.0;
        let s2 = 2.0 * params.sigma * params.sigma;
        let target = Array2::from_shape_fn((FILTER_SIZE, FILTER_SIZE), |(y, x)| {
            let d = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            Complex::new((-d / s2).exp(), 0.0)
        });
        let target_fft = fft2(&target, false);
        let mut tracker = MosseTracker {
            params: params.clone(),
            window,
            target_fft,
            num: Array2::from_elem((FILTER_SIZE, FILTER_SIZE), Complex::new(0.0, 0.0)),
            den: Array2::from_elem((FILTER_SIZE, FILTER_SIZE), Complex::new(0.0, 0.0)),
            center: seed_center,
            patch_side,
        };
        tracker.train_initial(frame);
        Ok(tracker)
    }

    fn patch_fft(&self, frame: &GrayImage) -> Array2<Complex<f64>> {
        let patch = subwindow(frame, self.center.0, self.center.1, self.patch_side, FILTER_SIZE);
        let pre = preprocess(&patch, &self.window);
        fft2(&pre, false)
    }

    fn accumulate(&mut self, f: &Array2<Complex<f64>>, rate: f64) {
        let lambda = self.params.lambda;
        ndarray::Zip::from(&mut self.num)
            .and(&self.target_fft)
            .and(f)
            .for_each(|n, &g, &fv| {
                let upd = g * fv.conj();
                *n = if rate >= 1.0 { upd } else { *n * (1.0 - rate) + upd * rate };
            });
        ndarray::Zip::from(&mut self.den).and(f).for_each(|d, &fv| {
            let upd = fv * fv.conj() + Complex::new(lambda, 0.0);
            *d = if rate >= 1.0 { upd } else { *d * (1.0 - rate) + upd * rate };
        });
    }

    /// Accumulate filter statistics at the current center.
    fn train(&mut self, frame: &GrayImage, rate: f64) {
        let f = self.patch_fft(frame);
        self.accumulate(&f, rate);
    }

    /// First training pass: the seed patch plus small rotation/scale
    /// perturbations, which keeps the filter from overfitting one sample.
    fn train_initial(&mut self, frame: &GrayImage) {
        let f = self.patch_fft(frame);
        self.accumulate(&f, 1.0);
        let n_aug = 8;
        for k in 0..n_aug {
            let angle = [-0.1, 0.1, -0.05, 0.05, 0.0, 0.0, -0.08, 0.08][k];
            let scale = [1.0, 1.0, 1.0, 1.0, 0.95, 1.05, 1.03, 0.97][k];
            let patch = self.warped_subwindow(frame, angle, scale);
            let pre = preprocess(&patch, &self.window);
            let ff = fft2(&pre, false);
            // equal-weight average over the augmentation set
            self.accumulate(&ff, 1.0 / (k + 2) as f64);
        }
    }

    /// Sample the tracked window under a small similarity transform.
    fn warped_subwindow(&self, frame: &GrayImage, angle: f64, scale: f64) -> Array2<f64> {
        let n = FILTER_SIZE;
        let (ca, sa) = (angle.cos(), angle.sin());
        let step = self.patch_side * scale / n as f64;
        Array2::from_shape_fn((n, n), |(y, x)| {
            let dx = (x as f64 + 0.5 - n as f64 / 2.0) * step;
            let dy = (y as f64 + 0.5 - n as f64 / 2.0) * step;
            let sx = self.center.0 + ca * dx - sa * dy;
            let sy = self.center.1 + sa * dx + ca * dy;
            sample_bilinear(frame, sx, sy)
        })
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    /// Advance to the next frame. Returns (new center, confidence, drifted).
    /// On drift the center is carried over unchanged.
    pub fn step(&mut self, frame: &GrayImage) -> (f64, f64, bool) {
        let f = self.patch_fft(frame);
        let h = Array2::from_shape_fn(f.dim(), |i| self.num[i] / self.den[i]);
        let resp_fft = Array2::from_shape_fn(f.dim(), |i| h[i] * f[i]);
        let resp = fft2(&resp_fft, true);
        // peak of the real response
        let mut peak = (0usize, 0usize, f64::NEG_INFINITY);
        for ((y, x), v) in resp.indexed_iter() {
            if v.re > peak.2 {
                peak = (y, x, v.re);
            }
        }
        let confidence = peak.2.clamp(0.0, 1.0);
        if confidence < self.params.confidence_threshold {
            return (self.center.0, self.center.1, true);
        }
        // parabolic subpixel refinement
        let n = FILTER_SIZE;
        let refine = |m1: f64, c0: f64, p1: f64| -> f64 {
            let d = m1 - 2.0 * c0 + p1;
            if d.abs() < 1e-12 { 0.0 } else { (0.5 * (m1 - p1) / d).clamp(-0.5, 0.5) }
        };
        let (py, px, _) = peak;
        let dx_sub = if px > 0 && px < n - 1 {
            refine(resp[[py, px - 1]].re, resp[[py, px]].re, resp[[py, px + 1]].re)
        } else {
            0.0
        };
        let dy_sub = if py > 0 && py < n - 1 {
            refine(resp[[py - 1, px]].re, resp[[py, px]].re, resp[[py + 1, px]].re)
        } else {
            0.0
        };
        let scale = self.patch_side / n as f64;
        let c = n as f64 / 2.0;
        let mut dx = (px as f64 + dx_sub - c) * scale;
        let mut dy = (py as f64 + dy_sub - c) * scale;
        let step_len = (dx * dx + dy * dy).sqrt();
        if step_len > self.params.max_step {
            let k = self.params.max_step / step_len;
            dx *= k;
            dy *= k;
        }
        self.center.0 += dx;
        self.center.1 += dy;
        self.train(frame, self.params.learning_rate);
        (self.center.0, self.center.1, false)
    }
}
