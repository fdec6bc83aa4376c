//! Evaluating the foreground prior *as if it were a mask prediction*.
//!
//! Each ground-truth instance gets the prior map its RoI produced. The map is
//! min-max normalized, thresholded at 0.5, resized (nearest neighbour) into
//! the instance's box and pasted onto the image canvas; the result is scored
//! as a mask detection. Because of the min-max normalization the procedure is
//! invariant under positive affine rescaling of the prior values; a constant
//! prior has no spatial information and produces an empty mask.

use crate::eval::map::{evaluate_mask_ap, Detection, EvalOptions, EvalReport, GtInstance};
use crate::synth::BitMask;

/// Binarize a `side x side` prior map into an image-space mask pasted into
/// `bbox` (`[x0, y0, x1, y1]` pixels) on an `img_h x img_w` canvas.
pub fn prior_to_mask(values: &[f64], side: usize, bbox: [f64; 4], img_h: usize, img_w: usize) -> BitMask {
    assert_eq!(values.len(), side * side, "prior map must be side*side");
    let mut out = BitMask::new(img_h, img_w);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return out; // constant prior: no foreground evidence
    }
    let [x0, y0, x1, y1] = bbox;
    if !(x1 > x0 && y1 > y0) {
        return out;
    }
    let px_lo = x0.floor().max(0.0) as usize;
    let px_hi = (x1.ceil() as usize).min(img_w);
    let py_lo = y0.floor().max(0.0) as usize;
    let py_hi = (y1.ceil() as usize).min(img_h);
    for py in py_lo..py_hi {
        let cy = py as f64 + 0.5;
        if cy < y0 || cy >= y1 {
            continue;
        }
        let v = ((cy - y0) / (y1 - y0) * side as f64 - 0.5).round().clamp(0.0, side as f64 - 1.0) as usize;
        for px in px_lo..px_hi {
            let cx = px as f64 + 0.5;
            if cx < x0 || cx >= x1 {
                continue;
            }
            let u = ((cx - x0) / (x1 - x0) * side as f64 - 0.5).round().clamp(0.0, side as f64 - 1.0)
                as usize;
            let norm = (values[v * side + u] - lo) / (hi - lo);
            if norm >= 0.5 {
                out.set(py, px, true);
            }
        }
    }
    out
}

/// One prior map extracted at a GT box, with the box head's confidence for
/// the instance's class (used as the detection score).
#[derive(Clone, Debug)]
pub struct PriorSample {
    pub values: Vec<f64>,
    pub score: f64,
}

/// Score per-GT prior maps as mask detections (one per GT instance, at the
/// matched box, scored by the box head's class confidence). `priors[i]`
/// belongs to `gt[i]`.
pub fn evaluate_prior_as_mask(
    gt: &[GtInstance],
    priors: &[PriorSample],
    side: usize,
    opts: &EvalOptions,
) -> EvalReport {
    assert_eq!(gt.len(), priors.len(), "one prior map per GT instance");
    let dets: Vec<Detection> = gt
        .iter()
        .zip(priors)
        .map(|(g, p)| Detection {
            image_id: g.image_id,
            class: g.class,
            score: p.score,
            bbox: g.bbox,
            mask: prior_to_mask(&p.values, side, g.bbox, g.mask.height(), g.mask.width()),
        })
        .collect();
    evaluate_mask_ap(gt, &dets, opts)
}
