//! Minimal image processing over `ndarray` grids: grayscale/RGB conversion,
//! bilinear sampling and resizing, Gaussian smoothing, and pyramid
//! downsampling. Images are `f64` with values nominally in [0, 1];
//! grayscale is `(H, W)`, color is channels-first `(3, H, W)`.

pub mod raster;

use ndarray::{Array2, Array3};

pub type GrayImage = Array2<f64>;
pub type RgbImage = Array3<f64>;

/// Rec. 601 luma.
pub fn luma(rgb: &RgbImage) -> GrayImage {
    let (_, h, w) = rgb.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = 0.299 * rgb[[0, y, x]] + 0.587 * rgb[[1, y, x]] + 0.114 * rgb[[2, y, x]];
        }
    }
    out
}

/// Bilinear sample at continuous (x, y), clamping to the border.
pub fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    img[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
        + img[[y0, x1]] * fx * (1.0 - fy)
        + img[[y1, x0]] * (1.0 - fx) * fy
        + img[[y1, x1]] * fx * fy
}

/// Bilinear resize with half-pixel (pixel-center) coordinate mapping.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let src_y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let src_x = (ox as f64 + 0.5) * sx - 0.5;
            out[[oy, ox]] = sample_bilinear(img, src_x, src_y);
        }
    }
    out
}

/// Per-channel bilinear resize of a color image.
pub fn resize_bilinear_rgb(img: &RgbImage, out_h: usize, out_w: usize) -> RgbImage {
    let (c, _, _) = img.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_bilinear(&plane, out_h, out_w));
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma).powi(2)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with border clamping.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let (h, w) = img.dim();
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r as isize).clamp(0, w as isize - 1) as usize;
                acc += img[[y, sx]] * kv;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r as isize).clamp(0, h as isize - 1) as usize;
                acc += tmp[[sy, x]] * kv;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Anti-aliased 2x downsample (blur then decimate).
pub fn downsample_half(img: &GrayImage) -> GrayImage {
    let blurred = gaussian_blur(img, 0.9);
    let (h, w) = img.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = blurred[[(2 * y).min(h - 1), (2 * x).min(w - 1)]];
        }
    }
    out
}

/// Crop `img` to the integer window `[x, x+w) x [y, y+h)`, replicating edge
/// pixels where the window leaves the image. Returns the crop and the
/// fraction of pixels that were padded.
pub fn crop_replicate(img: &RgbImage, x: isize, y: isize, w: usize, h: usize) -> (RgbImage, f64) {
    let (c, ih, iw) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut padded = 0usize;
    for oy in 0..h {
        for ox in 0..w {
            let sx = x + ox as isize;
            let sy = y + oy as isize;
            let inside = sx >= 0 && sy >= 0 && (sx as usize) < iw && (sy as usize) < ih;
            if !inside {
                padded += 1;
            }
            let cx = sx.clamp(0, iw as isize - 1) as usize;
            let cy = sy.clamp(0, ih as isize - 1) as usize;
            for ch in 0..c {
                out[[ch, oy, ox]] = img[[ch, cy, cx]];
            }
        }
    }
    (out, padded as f64 / (w * h) as f64)
}
