//! Binary raster operations: connected components, morphology, and hole
//! filling. Masks are `Array2<bool>`.

use ndarray::Array2;

use crate::boxes::BoundingBox;

pub type Mask = Array2<bool>;

/// 8-connected component labeling. Returns (labels, component count);
/// label 0 is background, components are 1-based.
pub fn connected_components(mask: &Mask) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut next = 0u32;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || labels[[sy, sx]] != 0 {
                continue;
            }
            next += 1;
            labels[[sy, sx]] = next;
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Per-component tight boxes (half-open pixel convention) and pixel counts,
/// indexed by component label - 1.
pub fn component_boxes(labels: &Array2<u32>, count: usize) -> Vec<(BoundingBox, usize)> {
    let (h, w) = labels.dim();
    let mut extents = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); count];
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == 0 {
                continue;
            }
            let e = &mut extents[(l - 1) as usize];
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x + 1);
            e.3 = e.3.max(y + 1);
            e.4 += 1;
        }
    }
    extents
        .into_iter()
        .map(|(x1, y1, x2, y2, n)| {
            (
                BoundingBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
                    .expect("component extents are non-degenerate"),
                n,
            )
        })
        .collect()
}

/// Elliptical structuring element offsets with radii (rx, ry).
fn ellipse_offsets(rx: usize, ry: usize) -> Vec<(isize, isize)> {
    let mut offs = Vec::new();
    for dy in -(ry as isize)..=(ry as isize) {
        for dx in -(rx as isize)..=(rx as isize) {
            let nx = dx as f64 / (rx as f64 + 0.5);
            let ny = dy as f64 / (ry as f64 + 0.5);
            if nx * nx + ny * ny <= 1.0 {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

pub fn dilate_ellipse(mask: &Mask, rx: usize, ry: usize, iterations: usize) -> Mask {
    let (h, w) = mask.dim();
    let offs = ellipse_offsets(rx, ry);
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut out = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                if !cur[[y, x]] {
                    continue;
                }
                for &(dy, dx) in &offs {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                        out[[ny as usize, nx as usize]] = true;
                    }
                }
            }
        }
        cur = out;
    }
    cur
}

pub fn erode_ellipse(mask: &Mask, rx: usize, ry: usize, iterations: usize) -> Mask {
    let (h, w) = mask.dim();
    let offs = ellipse_offsets(rx, ry);
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let mut out = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let keep = offs.iter().all(|&(dy, dx)| {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && cur[[ny as usize, nx as usize]]
                });
                out[[y, x]] = keep;
            }
        }
        cur = out;
    }
    cur
}

/// Fill holes: background pixels not reachable from the border (4-connected
/// through background) become foreground.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    let mut push = |y: usize, x: usize, outside: &mut Array2<bool>, stack: &mut Vec<(usize, usize)>| {
        if !mask[[y, x]] && !outside[[y, x]] {
            outside[[y, x]] = true;
            stack.push((y, x));
        }
    };
    for x in 0..w {
        push(0, x, &mut outside, &mut stack);
        push(h - 1, x, &mut outside, &mut stack);
    }
    for y in 0..h {
        push(y, 0, &mut outside, &mut stack);
        push(y, w - 1, &mut outside, &mut stack);
    }
    while let Some((y, x)) = stack.pop() {
        let neigh = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neigh {
            if ny < h && nx < w {
                push(ny, nx, &mut outside, &mut stack);
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y, x]] || !outside[[y, x]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn two_components_two_boxes() {
        let m = mask_from(&[
            "##....",
            "##....",
            "....##",
            "....##",
        ]);
        let (labels, n) = connected_components(&m);
        assert_eq!(n, 2);
        let boxes = component_boxes(&labels, n);
        assert_eq!(boxes[0].0, BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
        assert_eq!(boxes[1].0, BoundingBox::new(4.0, 2.0, 6.0, 4.0).unwrap());
        assert_eq!(boxes[0].1, 4);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = mask_from(&["#..", ".#.", "..#"]);
        let (_, n) = connected_components(&m);
        assert_eq!(n, 1);
    }

    #[test]
    fn dilation_grows_erosion_shrinks() {
        let m = mask_from(&[".....", "..#..", "....."]);
        let d = dilate_ellipse(&m, 1, 1, 1);
        assert!(d[[1, 1]] && d[[1, 3]] && d[[0, 2]] && d[[2, 2]]);
        let e = erode_ellipse(&d, 1, 1, 1);
        // erosion of the dilation contains the original pixel
        assert!(e[[1, 2]]);
    }

    #[test]
    fn fill_holes_closes_ring() {
        let m = mask_from(&[
            ".....",
            ".###.",
            ".#.#.",
            ".###.",
            ".....",
        ]);
        let f = fill_holes(&m);
        assert!(f[[2, 2]]);
        assert!(!f[[0, 0]]);
    }
}
