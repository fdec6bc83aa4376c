//! Evaluation: COCO-style mask AP, ambiguity/overlap analysis, OLS with a
//! slope t-test, and prior-as-mask scoring.

pub mod ambiguity;
pub mod iou;
pub mod map;
pub mod ols;
pub mod prior_eval;

pub use ambiguity::{
    ambiguity_flags, evaluate_by_ambiguity, per_class_overlap, AmbiguityReport, ClassOverlap,
    AMBIGUITY_IOU,
};
pub use iou::{box_iou, xywh_to_xyxy};
pub use map::{coco_thresholds, evaluate_mask_ap, ClassAp, Detection, EvalOptions, EvalReport, GtInstance};
pub use ols::{ols, reg_inc_beta, student_t_p_two_sided, OlsFit};
pub use prior_eval::{evaluate_prior_as_mask, prior_to_mask, PriorSample};

use crate::error::Result;
use crate::synth::{rle, Dataset};

/// Convert a dataset's annotations into evaluator ground-truth instances
/// (classes zero-based, boxes as `[x0, y0, x1, y1]`).
pub fn dataset_to_gt(ds: &Dataset) -> Result<Vec<GtInstance>> {
    ds.json
        .annotations
        .iter()
        .map(|ann| {
            Ok(GtInstance {
                image_id: ann.image_id,
                class: ann.category_id as usize - 1,
                bbox: xywh_to_xyxy(ann.bbox),
                mask: rle::decode(&ann.rle)?,
                ignore: false,
            })
        })
        .collect()
}
