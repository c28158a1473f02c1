//! Detection/ground-truth matching and the evaluation metrics: precision,
//! recall, F1, and average precision. Every frame is treated as an
//! independent image; matching is greedy in descending score order with
//! one-to-one ground-truth assignment.

use std::collections::BTreeMap;

use crate::boxes::{iou, BoundingBox, Detection};
use crate::data::annotations::AnnotationSet;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Outcome for one detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive { gt_index: usize },
    FalsePositive,
}

impl MatchLabel {
    pub fn is_tp(&self) -> bool {
        matches!(self, MatchLabel::TruePositive { .. })
    }
}

/// Result of matching one frame's detections against its ground truth.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// One label per input detection, in the input order.
    pub labels: Vec<MatchLabel>,
    /// Ground-truth boxes left unmatched (false negatives for this frame).
    pub unmatched_gts: usize,
}

/// Deterministic ordering: descending score, then ascending
/// (frame_index, x1, y1).
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.frame_index.cmp(&b.frame_index))
        .then(a.box_.x1.partial_cmp(&b.box_.x1).unwrap())
        .then(a.box_.y1.partial_cmp(&b.box_.y1).unwrap())
}

/// Greedily match detections of one frame to ground truth.
///
/// Detections are visited in descending score order (ties broken on
/// (frame_index, x1, y1)); each takes the unmatched ground-truth box of
/// highest IoU, provided that IoU reaches the threshold. A ground-truth box
/// matches at most one detection.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BoundingBox],
    iou_threshold: f64,
) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::config(format!(
            "iou_threshold {iou_threshold} outside (0, 1]"
        )));
    }
    if let Some(first) = dets.first() {
        if dets.iter().any(|d| d.frame_index != first.frame_index) {
            return Err(Error::data(
                "match_detections: detections span multiple frames".to_string(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(&dets[i], &dets[j]).then(i.cmp(&j)));

    let mut gt_taken = vec![false; gts.len()];
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let v = iou(&dets[di].box_, gt);
            if v >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            labels[di] = MatchLabel::TruePositive { gt_index: gi };
        }
    }
    let unmatched_gts = gt_taken.iter().filter(|t| !**t).count();
    Ok(MatchResult {
        labels,
        unmatched_gts,
    })
}

fn group_by_frame(dets: &[Detection]) -> BTreeMap<usize, Vec<Detection>> {
    let mut map: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        map.entry(d.frame_index).or_default().push(*d);
    }
    map
}

/// Label every detection TP/FP by per-frame greedy matching.
fn label_all(dets: &[Detection], ann: &AnnotationSet, iou_threshold: f64) -> Result<Vec<(Detection, bool)>> {
    let mut labeled = Vec::with_capacity(dets.len());
    for (frame, frame_dets) in group_by_frame(dets) {
        let res = match_detections(&frame_dets, ann.boxes_for(frame), iou_threshold)?;
        for (d, l) in frame_dets.iter().zip(res.labels.iter()) {
            labeled.push((*d, l.is_tp()));
        }
    }
    Ok(labeled)
}

/// Average precision: area under the precision-recall curve over the
/// globally score-sorted detection list, with all-point interpolation
/// (precision replaced by its running maximum from the right).
///
/// Errors when the annotation set contains no ground-truth boxes at all.
pub fn average_precision(dets: &[Detection], ann: &AnnotationSet, iou_threshold: f64) -> Result<f64> {
    let total_gt = ann.total_boxes();
    if total_gt == 0 {
        return Err(Error::data(
            "average precision undefined: annotation set has zero ground-truth boxes".to_string(),
        ));
    }
    if dets.is_empty() {
        return Ok(0.0);
    }
    let mut labeled = label_all(dets, ann, iou_threshold)?;
    labeled.sort_by(|(a, _), (b, _)| detection_order(a, b));

    let n = labeled.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, (_, is_tp)) in labeled.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // all-point interpolation: monotone precision envelope from the right
    for i in (0..n - 1).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    Ok(ap)
}

/// Evaluation summary. `ap` is computed over the full (unthresholded)
/// detection list; precision/recall/F1 and the counts reflect only
/// detections at or above the score threshold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Set when TP+FP = 0 and precision was defined as 0.
    pub precision_degenerate: bool,
    /// Set when there was no ground truth (recall and AP defined as 0).
    pub recall_degenerate: bool,
}

/// Precision, recall, and F1 over score-thresholded detections, plus AP
/// over the full list.
pub fn prf1(
    dets: &[Detection],
    ann: &AnnotationSet,
    iou_threshold: f64,
    score_threshold: f64,
) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::config(format!(
            "score_threshold {score_threshold} outside [0, 1]"
        )));
    }
    let total_gt = ann.total_boxes();
    let kept: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.score >= score_threshold)
        .collect();
    let labeled = label_all(&kept, ann, iou_threshold)?;
    let tp = labeled.iter().filter(|(_, t)| *t).count();
    let fp = labeled.len() - tp;
    let fne = total_gt - tp;

    let precision_degenerate = tp + fp == 0;
    let recall_degenerate = total_gt == 0;
    let precision = if precision_degenerate {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if recall_degenerate {
        0.0
    } else {
        tp as f64 / total_gt as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let ap = if recall_degenerate {
        0.0
    } else {
        average_precision(dets, ann, iou_threshold)?
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        ap,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fne,
        precision_degenerate,
        recall_degenerate,
    })
}
