//! Ambiguity partition and per-class overlap statistics.
//!
//! An instance is *ambiguous* when its ground-truth box overlaps some other
//! instance's box in the same image with IoU at or above a threshold (0.5 by
//! convention). The partition is a property of the ground truth alone and is
//! invariant under instance reordering.

use serde::{Deserialize, Serialize};

use crate::eval::iou::box_iou;
use crate::eval::map::{evaluate_mask_ap, Detection, EvalOptions, EvalReport, GtInstance};

/// Default box-IoU threshold for calling an instance ambiguous.
pub const AMBIGUITY_IOU: f64 = 0.5;

/// Flag each GT instance as ambiguous (true) or not.
pub fn ambiguity_flags(gt: &[GtInstance], iou_thresh: f64) -> Vec<bool> {
    let mut flags = vec![false; gt.len()];
    for i in 0..gt.len() {
        for j in 0..gt.len() {
            if i != j
                && gt[i].image_id == gt[j].image_id
                && box_iou(gt[i].bbox, gt[j].bbox) >= iou_thresh
            {
                flags[i] = true;
                break;
            }
        }
    }
    flags
}

/// Mask AP evaluated separately on the ambiguous and non-ambiguous GT
/// subsets. The complement subset is ignored (not deleted), so detections of
/// out-of-subset objects are dropped rather than counted as false positives.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmbiguityReport {
    pub ambiguous: EvalReport,
    pub non_ambiguous: EvalReport,
    pub num_ambiguous: usize,
    pub num_non_ambiguous: usize,
    pub iou_thresh: f64,
}

pub fn evaluate_by_ambiguity(
    gt: &[GtInstance],
    det: &[Detection],
    opts: &EvalOptions,
    iou_thresh: f64,
) -> AmbiguityReport {
    let flags = ambiguity_flags(gt, iou_thresh);
    let subset = |keep_ambiguous: bool| -> Vec<GtInstance> {
        gt.iter()
            .zip(&flags)
            .map(|(g, &amb)| {
                let mut g = g.clone();
                g.ignore = g.ignore || (amb != keep_ambiguous);
                g
            })
            .collect()
    };
    let amb_gt = subset(true);
    let non_gt = subset(false);
    AmbiguityReport {
        ambiguous: evaluate_mask_ap(&amb_gt, det, opts),
        non_ambiguous: evaluate_mask_ap(&non_gt, det, opts),
        num_ambiguous: flags.iter().filter(|&&f| f).count(),
        num_non_ambiguous: flags.iter().filter(|&&f| !f).count(),
        iou_thresh,
    }
}

/// Overlap statistics for one class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassOverlap {
    pub class: usize,
    /// Mean over instances of (max box IoU with any other instance in the
    /// image) — mirrors the ambiguity criterion.
    pub mean_max_iou: f64,
    /// Mean over instances of (mean box IoU with the other instances in the
    /// image, 0 when alone) — the all-pairs alternative aggregation.
    pub mean_pairwise_iou: f64,
    pub count: usize,
}

/// Per-class overlap statistics over a ground-truth set. Classes with no
/// instances are reported with `count = 0` and zero means.
pub fn per_class_overlap(gt: &[GtInstance], num_classes: usize) -> Vec<ClassOverlap> {
    let mut sum_max = vec![0.0f64; num_classes];
    let mut sum_pair = vec![0.0f64; num_classes];
    let mut count = vec![0usize; num_classes];
    for (i, g) in gt.iter().enumerate() {
        let mut best = 0.0f64;
        let mut pair_sum = 0.0f64;
        let mut others = 0usize;
        for (j, h) in gt.iter().enumerate() {
            if i == j || g.image_id != h.image_id {
                continue;
            }
            let iou = box_iou(g.bbox, h.bbox);
            best = best.max(iou);
            pair_sum += iou;
            others += 1;
        }
        sum_max[g.class] += best;
        sum_pair[g.class] += if others > 0 { pair_sum / others as f64 } else { 0.0 };
        count[g.class] += 1;
    }
    (0..num_classes)
        .map(|c| ClassOverlap {
            class: c,
            mean_max_iou: if count[c] > 0 { sum_max[c] / count[c] as f64 } else { 0.0 },
            mean_pairwise_iou: if count[c] > 0 { sum_pair[c] / count[c] as f64 } else { 0.0 },
            count: count[c],
        })
        .collect()
}
