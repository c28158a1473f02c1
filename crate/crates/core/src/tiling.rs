//! Frame tiling: decompose a frame into a grid of overlapping regions for
//! the segmentation stage, and merge per-region detections back into frame
//! coordinates.

use crate::boxes::{iou, BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::imgproc::RgbImage;

pub const MIN_REGION_SIDE: usize = 32;
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.5;

/// Grid geometry shared by all regions of a frame size.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
    pub region_w: usize,
    pub region_h: usize,
    pub stride_x: f64,
    pub stride_y: f64,
}

/// One region of the grid, in frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub rect: BoundingBox,
    pub grid_index: (usize, usize),
}

impl Region {
    pub fn x(&self) -> usize {
        self.rect.x1 as usize
    }
    pub fn y(&self) -> usize {
        self.rect.y1 as usize
    }
    pub fn width(&self) -> usize {
        (self.rect.x2 - self.rect.x1) as usize
    }
    pub fn height(&self) -> usize {
        (self.rect.y2 - self.rect.y1) as usize
    }
}

fn axis_layout(frame: usize, n: usize, overlap: f64) -> (usize, f64, Vec<usize>) {
    // region size so that n regions with the requested fractional overlap
    // span the frame; the last region is aligned flush with the frame edge
    let size = (frame as f64 / (n as f64 - (n as f64 - 1.0) * overlap)).ceil() as usize;
    let size = size.min(frame);
    let stride = if n > 1 {
        (frame - size) as f64 / (n - 1) as f64
    } else {
        0.0
    };
    let mut starts = Vec::with_capacity(n);
    for i in 0..n {
        let s = if i + 1 == n {
            frame - size
        } else {
            (i as f64 * stride).round() as usize
        };
        starts.push(s.min(frame - size));
    }
    (size, stride, starts)
}

/// Build a rows x cols grid of overlapping regions covering the frame.
///
/// Region size is `ceil(frame / (n - (n-1)*overlap))` per axis; strides are
/// chosen so the final region is flush with the frame edge, and all regions
/// stay inside frame bounds.
pub fn make_grid(
    frame_w: usize,
    frame_h: usize,
    rows: usize,
    cols: usize,
    overlap_fraction: f64,
) -> Result<(RegionGrid, Vec<Region>)> {
    if rows == 0 || cols == 0 {
        return Err(Error::config("grid must have at least 1 row and 1 column".to_string()));
    }
    if !(0.05..=0.5).contains(&overlap_fraction) {
        return Err(Error::config(format!(
            "overlap_fraction {overlap_fraction} outside [0.05, 0.5]"
        )));
    }
    let (region_w, stride_x, xs) = axis_layout(frame_w, cols, overlap_fraction);
    let (region_h, stride_y, ys) = axis_layout(frame_h, rows, overlap_fraction);
    if region_w < MIN_REGION_SIDE || region_h < MIN_REGION_SIDE {
        return Err(Error::config(format!(
            "grid {rows}x{cols} over {frame_w}x{frame_h} yields region {region_w}x{region_h}, below the {MIN_REGION_SIDE} px minimum"
        )));
    }
    let grid = RegionGrid { rows, cols, region_w, region_h, stride_x, stride_y };
    let mut regions = Vec::with_capacity(rows * cols);
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            regions.push(Region {
                rect: BoundingBox::new(
                    x as f64,
                    y as f64,
                    (x + region_w) as f64,
                    (y + region_h) as f64,
                )?,
                grid_index: (r, c),
            });
        }
    }
    Ok((grid, regions))
}

/// Pixel-exact crop of a region from a frame.
pub fn crop(frame: &RgbImage, region: &Region) -> Result<RgbImage> {
    let (_, h, w) = frame.dim();
    let (x, y) = (region.x(), region.y());
    let (rw, rh) = (region.width(), region.height());
    if x + rw > w || y + rh > h {
        return Err(Error::data(format!(
            "region ({x}, {y}, {}, {}) outside {w}x{h} frame",
            x + rw,
            y + rh
        )));
    }
    Ok(frame
        .slice(ndarray::s![.., y..y + rh, x..x + rw])
        .to_owned())
}

/// Merge region-local detections into frame coordinates. Detections are
/// offset by their region origin; duplicates arising from overlap zones
/// collapse to the higher-score member when their IoU reaches
/// `merge_threshold`.
pub fn stitch(
    per_region: &[(Region, Vec<Detection>)],
    merge_threshold: f64,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (region, dets) in per_region {
        for d in dets {
            let b = d.box_.translated(region.rect.x1, region.rect.y1);
            all.push(Detection::new(b, d.score, d.frame_index)?);
        }
    }
    // score-descending greedy suppression; deterministic tie-break
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.box_.x1.partial_cmp(&b.box_.x1).unwrap())
            .then(a.box_.y1.partial_cmp(&b.box_.y1).unwrap())
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in all {
        if kept.iter().all(|k| iou(&k.box_, &d.box_) < merge_threshold) {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Exhaustive pixel-coverage oracle: how many regions cover each pixel.
    fn coverage_counts(frame_w: usize, frame_h: usize, regions: &[Region]) -> ndarray::Array2<u32> {
        let mut cov = ndarray::Array2::zeros((frame_h, frame_w));
        for r in regions {
            for y in r.y()..r.y() + r.height() {
                for x in r.x()..r.x() + r.width() {
                    cov[[y, x]] += 1;
                }
            }
        }
        cov
    }

    #[test]
    fn nps_geometry_full_coverage_and_overlap() {
        let (_, regions) = make_grid(1920, 1080, 3, 3, 0.2).unwrap();
        assert_eq!(regions.len(), 9);
        let cov = coverage_counts(1920, 1080, &regions);
        assert!(cov.iter().all(|&c| c >= 1), "not all pixels covered");
        // every pixel on an interior region boundary is covered >= 2 times
        for r in &regions {
            for &bx in &[r.x(), r.x() + r.width() - 1] {
                if bx == 0 || bx == 1919 {
                    continue;
                }
                for y in r.y()..r.y() + r.height() {
                    assert!(cov[[y, bx]] >= 2, "boundary pixel ({bx},{y}) covered once");
                }
            }
        }
    }

    #[test]
    fn single_region_equals_frame() {
        let (grid, regions) = make_grid(640, 480, 1, 1, 0.2).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!((grid.region_w, grid.region_h), (640, 480));
        assert_eq!(regions[0].rect, BoundingBox::new(0.0, 0.0, 640.0, 480.0).unwrap());
    }

    #[test]
    fn fl_geometry_four_regions() {
        let (_, regions) = make_grid(640, 480, 2, 2, 0.2).unwrap();
        assert_eq!(regions.len(), 4);
        let cov = coverage_counts(640, 480, &regions);
        assert!(cov.iter().all(|&c| c >= 1));
    }

    #[test]
    fn largest_training_box_fits_a_region() {
        // max drone size 65x21; the overlap zone must be at least that wide
        let (grid, regions) = make_grid(1920, 1080, 3, 3, 0.2).unwrap();
        let overlap_x = grid.region_w as f64 - grid.stride_x;
        let overlap_y = grid.region_h as f64 - grid.stride_y;
        assert!(overlap_x >= 65.0, "x overlap {overlap_x} < 65");
        assert!(overlap_y >= 21.0, "y overlap {overlap_y} < 21");
        // place the box at every position; some region must contain it fully
        let (bw, bh) = (65usize, 21usize);
        for y0 in (0..1080 - bh).step_by(7) {
            for x0 in (0..1920 - bw).step_by(13) {
                let fits = regions.iter().any(|r| {
                    x0 >= r.x() && y0 >= r.y() && x0 + bw <= r.x() + r.width() && y0 + bh <= r.y() + r.height()
                });
                assert!(fits, "box at ({x0},{y0}) fits no region");
            }
        }
    }

    #[test]
    fn tiny_regions_rejected() {
        assert!(make_grid(100, 100, 8, 8, 0.1).is_err());
    }

    #[test]
    fn crop_full_frame_is_identity_and_roundtrip() {
        let frame = Array3::from_shape_fn((3, 80, 120), |(c, y, x)| (c * 100000 + y * 1000 + x) as f64);
        let (_, regions) = make_grid(120, 80, 1, 1, 0.2).unwrap();
        let crop0 = crop(&frame, &regions[0]).unwrap();
        assert_eq!(crop0, frame);

        let (_, regions) = make_grid(120, 80, 2, 2, 0.25).unwrap();
        for r in &regions {
            let c = crop(&frame, r).unwrap();
            for y in 0..r.height() {
                for x in 0..r.width() {
                    assert_eq!(c[[0, y, x]], frame[[0, y + r.y(), x + r.x()]]);
                }
            }
        }
        // overlapping crops agree on shared pixels by construction of the
        // comparison above (both compare against the frame)
    }

    #[test]
    fn stitch_offsets_and_merges() {
        let (_, regions) = make_grid(200, 200, 2, 2, 0.3).unwrap();
        let b = BoundingBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        // same physical object seen by two regions at different local coords
        let r0 = regions[0].clone();
        let r1 = regions[1].clone();
        let local0 = b.translated(-r0.rect.x1, -r0.rect.y1);
        let local1 = b.translated(-r1.rect.x1, -r1.rect.y1);
        // place object inside the overlap zone instead: use region 1's x start
        let obj = BoundingBox::new(r1.rect.x1 + 2.0, 10.0, r1.rect.x1 + 14.0, 22.0).unwrap();
        let l0 = obj.translated(-r0.rect.x1, -r0.rect.y1);
        let l1 = obj.translated(-r1.rect.x1, -r1.rect.y1);
        let dets = vec![
            (r0, vec![Detection::new(l0, 0.9, 0).unwrap()]),
            (r1, vec![Detection::new(l1, 0.7, 0).unwrap()]),
        ];
        let out = stitch(&dets, DEFAULT_MERGE_THRESHOLD).unwrap();
        assert_eq!(out.len(), 1, "duplicate in overlap zone not merged");
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[0].box_, obj);
        let _ = (local0, local1);
    }

    #[test]
    fn stitch_is_idempotent_and_empty_passthrough() {
        assert!(stitch(&[], 0.5).unwrap().is_empty());
        let (_, regions) = make_grid(100, 100, 1, 1, 0.2).unwrap();
        let d = Detection::new(BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap(), 0.8, 3).unwrap();
        let out1 = stitch(&[(regions[0].clone(), vec![d])], 0.5).unwrap();
        let rewrapped = vec![(regions[0].clone(), out1.clone())];
        // re-wrapping in the full-frame region keeps coordinates unchanged
        let out2 = stitch(&rewrapped, 0.5).unwrap();
        assert_eq!(out1, out2);
    }
}
