//! The three-part training objective: focal loss on the segmentation
//! output, Distance-IoU between predicted and matched ground-truth boxes,
//! and smooth-L1 supervision of the pixel-attention mask.
//!
//! Plain `f64` implementations live here as the reference formulas; the
//! tape ops in [`crate::nn::tape`] mirror them for training. The box term
//! is made differentiable through mask extraction by computing a soft box
//! (probability-weighted centroid and extent) over each matched component.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::boxes::{diou_terms, BoundingBox};
use crate::error::{Error, Result};
use crate::nn::tape::{Tape, TensorId};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("focal alpha {} outside (0, 1]", self.alpha)));
        }
        if self.gamma < 0.0 {
            return Err(Error::config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    /// Plain cross-entropy expressed as a focal configuration: gamma = 0
    /// removes the modulation, alpha = 0.5 weights classes evenly (the loss
    /// becomes 0.5 x binary cross-entropy).
    pub fn cross_entropy() -> Self {
        FocalParams { alpha: 0.5, gamma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_focal: f64,
    pub w_diou: f64,
    pub w_smoothl1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_focal: 1.0, w_diou: 1.0, w_smoothl1: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_focal < 0.0 || self.w_diou < 0.0 || self.w_smoothl1 < 0.0 {
            return Err(Error::config("loss weights must be nonnegative".to_string()));
        }
        if self.w_focal == 0.0 && self.w_diou == 0.0 && self.w_smoothl1 == 0.0 {
            return Err(Error::config("at least one loss weight must be positive".to_string()));
        }
        Ok(())
    }
}

/// Mean focal loss: `-alpha_t (1 - p_t)^gamma ln(p_t)` averaged over pixels,
/// with `p_t = pred` on positives and `1 - pred` on negatives. Predictions
/// are clamped to `[eps, 1-eps]`.
pub fn focal_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>, p: &FocalParams) -> Result<f64> {
    p.validate()?;
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "focal_loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0;
    ndarray::Zip::from(pred).and(target).for_each(|&pv, &t| {
        let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let (pt, at) = if t > 0.5 { (pc, p.alpha) } else { (1.0 - pc, 1.0 - p.alpha) };
        acc += -at * (1.0 - pt).powf(p.gamma) * pt.ln();
    });
    Ok(acc / pred.len() as f64)
}

/// Distance-IoU loss between two boxes: `1 - IoU + rho^2 / c^2`.
pub fn diou_loss(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let t = diou_terms(pred, gt);
    1.0 - t.iou + t.center_distance_sq / t.enclosing_diag_sq
}

/// Mean smooth-L1 (Huber): `0.5 d^2 / beta` for `|d| < beta`, else
/// `|d| - 0.5 beta`.
pub fn smooth_l1(pred: &ArrayD<f64>, target: &ArrayD<f64>, beta: f64) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::config(format!("smooth_l1 beta {beta} must be > 0")));
    }
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "smooth_l1: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut acc = 0.0;
    ndarray::Zip::from(pred).and(target).for_each(|&pv, &t| {
        let d = (pv - t).abs();
        acc += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
    });
    Ok(acc / pred.len() as f64)
}

/// Per-term values of one combined loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub diou: f64,
    pub smooth_l1: f64,
    pub total: f64,
}

/// Weighted combination of the three terms. The DIoU term averages over
/// matched predicted/ground-truth box pairs and is skipped (contributes 0)
/// when no pairs matched; the smooth-L1 term is skipped when no attention
/// mask is supervised.
pub fn total_loss(
    seg_pred: &ArrayD<f64>,
    seg_target: &ArrayD<f64>,
    attn_pair: Option<(&ArrayD<f64>, &ArrayD<f64>)>,
    box_pairs: &[(BoundingBox, BoundingBox)],
    focal_params: &FocalParams,
    sl1_beta: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let focal = focal_loss(seg_pred, seg_target, focal_params)?;
    let diou = if box_pairs.is_empty() {
        0.0
    } else {
        box_pairs.iter().map(|(p, g)| diou_loss(p, g)).sum::<f64>() / box_pairs.len() as f64
    };
    let sl1 = match attn_pair {
        Some((p, t)) => smooth_l1(p, t, sl1_beta)?,
        None => 0.0,
    };
    Ok(LossBreakdown {
        focal,
        diou,
        smooth_l1: sl1,
        total: weights.w_focal * focal + weights.w_diou * diou + weights.w_smoothl1 * sl1,
    })
}

/// A differentiable box: scalar tape nodes for center and extent.
#[derive(Debug, Clone, Copy)]
pub struct SoftBox {
    pub cx: TensorId,
    pub cy: TensorId,
    pub w: TensorId,
    pub h: TensorId,
}

/// Probability-weighted box statistics of a mask restricted to a component
/// support. Extent uses the uniform-distribution identity
/// `width = sqrt(12 var + 1)`, which is exact for a solid axis-aligned
/// rectangle of constant probability.
pub fn soft_box_from_mask(t: &mut Tape, mask: TensorId, support: &Array2<bool>) -> Result<SoftBox> {
    let (h, w) = support.dim();
    if t.value(mask).shape() != [h, w] {
        return Err(Error::shape(format!(
            "soft_box_from_mask: mask {:?} vs support ({h}, {w})",
            t.value(mask).shape()
        )));
    }
    let ind = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| if support[[ix[0], ix[1]]] { 1.0 } else { 0.0 });
    let xs = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| ix[1] as f64 + 0.5);
    let ys = ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| ix[0] as f64 + 0.5);
    let ind = t.constant(ind);
    let xs = t.constant(xs);
    let ys = t.constant(ys);

    let wm = t.mul(mask, ind)?;
    let wsum0 = t.sum(wm);
    let wsum = t.add_scalar(wsum0, 1e-9);

    let mut weighted_moment = |t: &mut Tape, coord: TensorId, power: f64| -> Result<TensorId> {
        let c = if power == 1.0 { coord } else { t.pow_const(coord, power) };
        let prod = t.mul(wm, c)?;
        let s = t.sum(prod);
        t.div(s, wsum)
    };
    let cx = weighted_moment(t, xs, 1.0)?;
    let cy = weighted_moment(t, ys, 1.0)?;
    let ex2 = weighted_moment(t, xs, 2.0)?;
    let ey2 = weighted_moment(t, ys, 2.0)?;

    let mut extent = |t: &mut Tape, e2: TensorId, c: TensorId| -> Result<TensorId> {
        let c2 = t.pow_const(c, 2.0);
        let var = t.sub(e2, c2)?;
        let var = t.relu(var); // guard tiny negative rounding
        let scaled = t.scale(var, 12.0);
        let plus1 = t.add_scalar(scaled, 1.0);
        Ok(t.sqrt(plus1))
    };
    let bw = extent(t, ex2, cx)?;
    let bh = extent(t, ey2, cy)?;
    Ok(SoftBox { cx, cy, w: bw, h: bh })
}

/// Distance-IoU loss between a soft box and a fixed ground-truth box,
/// assembled from scalar tape ops so gradients flow into the mask.
pub fn diou_loss_soft(t: &mut Tape, sb: &SoftBox, gt: &BoundingBox) -> Result<TensorId> {
    let half_w = t.scale(sb.w, 0.5);
    let half_h = t.scale(sb.h, 0.5);
    let x1 = t.sub(sb.cx, half_w)?;
    let x2 = t.add(sb.cx, half_w)?;
    let y1 = t.sub(sb.cy, half_h)?;
    let y2 = t.add(sb.cy, half_h)?;
    diou_loss_from_corners(t, [x1, y1, x2, y2], gt)
}

/// Distance-IoU loss with the predicted box given as four scalar nodes.
pub fn diou_loss_from_corners(t: &mut Tape, pred: [TensorId; 4], gt: &BoundingBox) -> Result<TensorId> {
    let [px1, py1, px2, py2] = pred;
    let gx1 = t.scalar_const(gt.x1);
    let gy1 = t.scalar_const(gt.y1);
    let gx2 = t.scalar_const(gt.x2);
    let gy2 = t.scalar_const(gt.y2);

    // intersection
    let ix1 = t.max_t(px1, gx1)?;
    let iy1 = t.max_t(py1, gy1)?;
    let ix2 = t.min_t(px2, gx2)?;
    let iy2 = t.min_t(py2, gy2)?;
    let iw0 = t.sub(ix2, ix1)?;
    let ih0 = t.sub(iy2, iy1)?;
    let iw = t.relu(iw0);
    let ih = t.relu(ih0);
    let inter = t.mul(iw, ih)?;

    // union
    let pw0 = t.sub(px2, px1)?;
    let ph0 = t.sub(py2, py1)?;
    let pw = t.relu(pw0);
    let ph = t.relu(ph0);
    let parea = t.mul(pw, ph)?;
    let garea = t.scalar_const(gt.area());
    let areas = t.add(parea, garea)?;
    let union = t.sub(areas, inter)?;
    let iou = t.div(inter, union)?;

    // center distance
    let pcx0 = t.add(px1, px2)?;
    let pcx = t.scale(pcx0, 0.5);
    let pcy0 = t.add(py1, py2)?;
    let pcy = t.scale(pcy0, 0.5);
    let (gcx, gcy) = gt.center();
    let gcx = t.scalar_const(gcx);
    let gcy = t.scalar_const(gcy);
    let dx = t.sub(pcx, gcx)?;
    let dy = t.sub(pcy, gcy)?;
    let dx2 = t.pow_const(dx, 2.0);
    let dy2 = t.pow_const(dy, 2.0);
    let rho2 = t.add(dx2, dy2)?;

    // enclosing diagonal
    let ex1 = t.min_t(px1, gx1)?;
    let ey1 = t.min_t(py1, gy1)?;
    let ex2 = t.max_t(px2, gx2)?;
    let ey2 = t.max_t(py2, gy2)?;
    let ew = t.sub(ex2, ex1)?;
    let eh = t.sub(ey2, ey1)?;
    let ew2 = t.pow_const(ew, 2.0);
    let eh2 = t.pow_const(eh, 2.0);
    let c2 = t.add(ew2, eh2)?;

    let penalty = t.div(rho2, c2)?;
    let one = t.scalar_const(1.0);
    let one_minus_iou = t.sub(one, iou)?;
    t.add(one_minus_iou, penalty)
}
