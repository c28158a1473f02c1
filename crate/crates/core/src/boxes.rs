//! Axis-aligned boxes, detections, and the IoU / Distance-IoU geometry that
//! the matcher, the losses, and the evaluation metrics are built on.
//!
//! Boxes use the half-open pixel convention `[x1, x2) x [y1, y2)`: a box
//! covering the single pixel at (3, 7) is `(3, 7, 4, 8)`. All geometry is
//! computed in continuous coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, half-open: `[x1, x2) x [y1, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Construct a box, rejecting degenerate or non-finite coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::data(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::data(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2}): width and height must be positive"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Translate by (dx, dy).
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Intersection area with another box (0 when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Clamp to frame bounds `[0, w) x [0, h)`. Errors if nothing remains.
    pub fn clamped(&self, frame_w: f64, frame_h: f64) -> Result<BoundingBox> {
        BoundingBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(frame_w),
            self.y2.min(frame_h),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// A scored box on a specific frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: BoundingBox,
    pub score: f64,
    pub frame_index: usize,
}

impl Detection {
    pub fn new(box_: BoundingBox, score: f64, frame_index: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::data(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Self {
            box_,
            score,
            frame_index,
        })
    }
}

/// The three terms of the Distance-IoU computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DIoUBreakdown {
    /// Intersection over union, in [0, 1].
    pub iou: f64,
    /// Squared distance between the two box centers.
    pub center_distance_sq: f64,
    /// Squared diagonal of the smallest box enclosing both.
    pub enclosing_diag_sq: f64,
}

/// Intersection over union of two boxes. 0 when disjoint, 1 iff identical.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU plus the center-distance and enclosing-diagonal terms used by the
/// Distance-IoU loss.
pub fn diou_terms(pred: &BoundingBox, gt: &BoundingBox) -> DIoUBreakdown {
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let center_distance_sq = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let enc = pred.enclosing(gt);
    let enclosing_diag_sq = enc.width().powi(2) + enc.height().powi(2);
    DIoUBreakdown {
        iou: iou(pred, gt),
        center_distance_sq,
        enclosing_diag_sq,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Pixel-rasterization oracle: count member pixels of intersection and
    /// union on integer boxes. Independent of the continuous-geometry path.
    fn iou_raster_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let x_lo = a.x1.min(b.x1) as i64;
        let x_hi = a.x2.max(b.x2) as i64;
        let y_lo = a.y1.min(b.y1) as i64;
        let y_hi = a.y2.max(b.y2) as i64;
        let mut inter = 0u64;
        let mut union = 0u64;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_a = a.contains_point(xc, yc);
                let in_b = b.contains_point(xc, yc);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, 0.0).is_err());
        assert!(BoundingBox::new(3.0, 1.0, 2.0, 2.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_abs_diff_eq!(iou(&a, &a), 1.0);
        let b = bb(20.0, 20.0, 30.0, 30.0);
        assert_abs_diff_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap_matches_raster_oracle() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        let v = iou(&a, &b);
        assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, iou_raster_oracle(&a, &b), epsilon = 1e-12);
    }

    #[test]
    fn iou_matches_raster_oracle_randomized() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let x1 = rng.gen_range(0..40) as f64;
            let y1 = rng.gen_range(0..40) as f64;
            let a = bb(x1, y1, x1 + rng.gen_range(1..30) as f64, y1 + rng.gen_range(1..30) as f64);
            let x1 = rng.gen_range(0..40) as f64;
            let y1 = rng.gen_range(0..40) as f64;
            let b = bb(x1, y1, x1 + rng.gen_range(1..30) as f64, y1 + rng.gen_range(1..30) as f64);
            assert_abs_diff_eq!(iou(&a, &b), iou_raster_oracle(&a, &b), epsilon = 1e-9);
        }
    }

    #[test]
    fn diou_terms_identity() {
        let a = bb(2.0, 3.0, 9.0, 8.0);
        let d = diou_terms(&a, &a);
        assert_abs_diff_eq!(d.iou, 1.0);
        assert_abs_diff_eq!(d.center_distance_sq, 0.0);
    }

    #[test]
    fn diou_terms_adjacent_boxes() {
        // centers (1,1) and (3,1): rho^2 = 4; enclosing (0,0,4,2): c^2 = 20
        let d = diou_terms(&bb(0.0, 0.0, 2.0, 2.0), &bb(2.0, 0.0, 4.0, 2.0));
        assert_abs_diff_eq!(d.iou, 0.0);
        assert_abs_diff_eq!(d.center_distance_sq, 4.0);
        assert_abs_diff_eq!(d.enclosing_diag_sq, 20.0);
    }

    #[test]
    fn diou_terms_translation_invariant() {
        let a = bb(0.0, 0.0, 5.0, 4.0);
        let b = bb(3.0, 1.0, 9.0, 6.0);
        let d0 = diou_terms(&a, &b);
        let t = 13.5;
        let d1 = diou_terms(&a.translated(t, t), &b.translated(t, t));
        assert_abs_diff_eq!(d0.iou, d1.iou, epsilon = 1e-12);
        assert_abs_diff_eq!(d0.center_distance_sq, d1.center_distance_sq, epsilon = 1e-9);
        assert_abs_diff_eq!(d0.enclosing_diag_sq, d1.enclosing_diag_sq, epsilon = 1e-9);
    }

    #[test]
    fn detection_score_validated() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(b, 1.2, 0).is_err());
        assert!(Detection::new(b, 0.5, 3).is_ok());
    }
}
