//! Proposal sampling and target construction.
//!
//! There is no region-proposal network: proposals are the ground-truth boxes
//! plus jittered copies of them, plus random background boxes. Every
//! candidate is matched to the ground truth by best box IoU — at least 0.5
//! makes it a foreground RoI of the matched instance's class, anything else
//! is background (class `K`). Foreground RoIs are all kept; background RoIs
//! are subsampled to the configured fg:bg ratio.
//!
//! Mask targets exist only for *supervised* RoIs: foreground RoIs whose class
//! is in the strong split. Weak-class and background RoIs never get a target
//! — their annotation masks are never even read — so the partially
//! supervised gating is exact by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou::box_iou;
use crate::synth::{BitMask, ClassSplit};
use crate::tensor::lerp_coeff;

/// Box IoU at or above this matches a proposal to a ground-truth instance.
pub const FG_IOU_THRESH: f64 = 0.5;

/// Proposal jitter / negative-sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    /// Jittered copies per ground-truth box (the exact box is always kept).
    pub per_gt: usize,
    /// Uniform translation noise as a fraction of the box side, per axis.
    pub translate_frac: f64,
    /// Uniform scale noise: sides multiplied by `U(1-s, 1+s)`, per axis.
    pub scale_frac: f64,
    /// Random background candidates sampled per image.
    pub neg_per_image: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig { per_gt: 2, translate_frac: 0.15, scale_frac: 0.15, neg_per_image: 8 }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.translate_frac) || !(0.0..0.5).contains(&self.scale_frac) {
            return Err(Error::Config(
                "jitter fractions must lie in [0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

/// One image's ground truth as the sampler sees it.
#[derive(Clone, Debug)]
pub struct GtBox {
    /// `[x0, y0, x1, y1]` image coordinates.
    pub rect: [f64; 4],
    /// 0-based foreground class.
    pub class: usize,
}

/// Sampled RoIs for one image, with labels and regression/mask supervision.
#[derive(Clone, Debug)]
pub struct RoiBatch {
    /// Proposal boxes `[x0, y0, x1, y1]`.
    pub boxes: Vec<[f64; 4]>,
    /// Matched ground-truth index (into the image's GT list), `None` for
    /// background.
    pub matched_gt: Vec<Option<usize>>,
    /// Class labels; background is `num_classes`.
    pub labels: Vec<usize>,
    /// Box regression targets (deltas); zero for background rows, which the
    /// box loss never reads.
    pub box_targets: Vec<[f64; 4]>,
    /// Rows with a foreground match.
    pub fg_rows: Vec<usize>,
    /// Per-row flag: foreground *and* strong class.
    pub supervised: Vec<bool>,
}

impl RoiBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Rows that receive mask supervision.
    pub fn supervised_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.supervised[r]).collect()
    }
}

/// Standard box-delta parametrization of `gt` relative to proposal `p`.
pub fn box_deltas(p: [f64; 4], gt: [f64; 4]) -> [f64; 4] {
    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let gw = gt[2] - gt[0];
    let gh = gt[3] - gt[1];
    [
        ((gt[0] + gt[2]) - (p[0] + p[2])) / (2.0 * pw),
        ((gt[1] + gt[3]) - (p[1] + p[3])) / (2.0 * ph),
        (gw / pw).ln(),
        (gh / ph).ln(),
    ]
}

fn clamp_box(rect: [f64; 4], img_h: usize, img_w: usize) -> [f64; 4] {
    let (w, h) = (img_w as f64, img_h as f64);
    let x0 = rect[0].clamp(0.0, w - 2.0);
    let y0 = rect[1].clamp(0.0, h - 2.0);
    let x1 = rect[2].clamp(x0 + 2.0, w);
    let y1 = rect[3].clamp(y0 + 2.0, h);
    [x0, y0, x1, y1]
}

/// Sample proposals for one image. Candidates are generated in a fixed order
/// (per-GT exact + jittered copies, then random negatives), matched by best
/// IoU, and background rows are thinned to at most `bg_ratio` per foreground
/// row (keeping candidate order). Deterministic given the RNG state.
pub fn sample_proposals(
    gts: &[GtBox],
    img_h: usize,
    img_w: usize,
    split: &ClassSplit,
    jitter: &JitterConfig,
    bg_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> RoiBatch {
    assert!(!gts.is_empty(), "sample_proposals: scene must have instances");
    let num_classes = split.num_classes();

    let mut cands: Vec<[f64; 4]> = Vec::new();
    for gt in gts {
        cands.push(gt.rect);
        let bw = gt.rect[2] - gt.rect[0];
        let bh = gt.rect[3] - gt.rect[1];
        for _ in 0..jitter.per_gt {
            let t = jitter.translate_frac;
            let s = jitter.scale_frac;
            let dx = if t > 0.0 { rng.gen_range(-t..t) * bw } else { 0.0 };
            let dy = if t > 0.0 { rng.gen_range(-t..t) * bh } else { 0.0 };
            let sx = if s > 0.0 { rng.gen_range(1.0 - s..1.0 + s) } else { 1.0 };
            let sy = if s > 0.0 { rng.gen_range(1.0 - s..1.0 + s) } else { 1.0 };
            let cx = (gt.rect[0] + gt.rect[2]) / 2.0 + dx;
            let cy = (gt.rect[1] + gt.rect[3]) / 2.0 + dy;
            let (hw, hh) = (bw * sx / 2.0, bh * sy / 2.0);
            cands.push(clamp_box([cx - hw, cy - hh, cx + hw, cy + hh], img_h, img_w));
        }
    }
    for _ in 0..jitter.neg_per_image {
        let side_max = (img_h.min(img_w) as f64 / 2.0).max(7.0);
        let sw = rng.gen_range(6.0..side_max);
        let sh = rng.gen_range(6.0..side_max);
        let cx = rng.gen_range(0.0..img_w as f64);
        let cy = rng.gen_range(0.0..img_h as f64);
        cands.push(clamp_box([cx - sw / 2.0, cy - sh / 2.0, cx + sw / 2.0, cy + sh / 2.0], img_h, img_w));
    }

    // Match every candidate by best IoU.
    let mut rows: Vec<([f64; 4], Option<usize>)> = Vec::with_capacity(cands.len());
    for &c in &cands {
        let mut best = (0.0, None);
        for (gi, gt) in gts.iter().enumerate() {
            let iou = box_iou(c, gt.rect);
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        let matched = if best.0 >= FG_IOU_THRESH { best.1 } else { None };
        rows.push((c, matched));
    }

    // Keep all foreground; subsample background to the ratio.
    let fg_idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1.is_some()).collect();
    let mut bg_idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].1.is_none()).collect();
    let bg_keep = ((bg_ratio * fg_idx.len() as f64).floor() as usize).min(bg_idx.len());
    // Fisher-Yates with the step RNG, then restore candidate order.
    for i in (1..bg_idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        bg_idx.swap(i, j);
    }
    bg_idx.truncate(bg_keep);
    bg_idx.sort_unstable();

    let mut keep: Vec<usize> = fg_idx.into_iter().chain(bg_idx).collect();
    keep.sort_unstable();

    let mut batch = RoiBatch {
        boxes: Vec::with_capacity(keep.len()),
        matched_gt: Vec::with_capacity(keep.len()),
        labels: Vec::with_capacity(keep.len()),
        box_targets: Vec::with_capacity(keep.len()),
        fg_rows: Vec::new(),
        supervised: Vec::with_capacity(keep.len()),
    };
    for &i in &keep {
        let (rect, matched) = rows[i];
        let row = batch.boxes.len();
        batch.boxes.push(rect);
        batch.matched_gt.push(matched);
        match matched {
            Some(gi) => {
                let class = gts[gi].class;
                batch.labels.push(class);
                batch.box_targets.push(box_deltas(rect, gts[gi].rect));
                batch.fg_rows.push(row);
                batch.supervised.push(split.is_strong(class));
            }
            None => {
                batch.labels.push(num_classes);
                batch.box_targets.push([0.0; 4]);
                batch.supervised.push(false);
            }
        }
    }
    batch
}

/// Resample a full-image binary mask into an `out x out` grid over `rect`:
/// each cell samples the mask bilinearly (half-pixel centers, clamped) at the
/// cell center and thresholds at 0.5.
pub fn resample_mask_to_grid(mask: &BitMask, rect: [f64; 4], out: usize) -> BitMask {
    let (h, w) = (mask.height(), mask.width());
    let [x0, y0, x1, y1] = rect;
    let bw = x1 - x0;
    let bh = y1 - y0;
    assert!(bw > 0.0 && bh > 0.0, "resample_mask_to_grid: degenerate box");
    let at = |y: usize, x: usize| -> f64 {
        if mask.get(y, x) {
            1.0
        } else {
            0.0
        }
    };
    BitMask::from_fn(out, out, |i, j| {
        let sy = y0 + (i as f64 + 0.5) * bh / out as f64;
        let sx = x0 + (j as f64 + 0.5) * bw / out as f64;
        let (r0, r1, wy) = lerp_coeff(sy - 0.5, h);
        let (c0, c1, wx) = lerp_coeff(sx - 0.5, w);
        let v = (1.0 - wy) * ((1.0 - wx) * at(r0, c0) + wx * at(r0, c1))
            + wy * ((1.0 - wx) * at(r1, c0) + wx * at(r1, c1));
        v >= 0.5
    })
}

/// Build mask targets for the supervised rows of a batch. `gt_masks[i]` is
/// the full-image mask of the image's `i`-th ground-truth instance; only the
/// masks of matched *strong* instances are read.
pub fn make_mask_targets(batch: &RoiBatch, gt_masks: &[BitMask], out: usize) -> Vec<(usize, BitMask)> {
    batch
        .supervised_rows()
        .into_iter()
        .map(|row| {
            let gi = batch.matched_gt[row].expect("supervised row must be matched");
            (row, resample_mask_to_grid(&gt_masks[gi], batch.boxes[row], out))
        })
        .collect()
}
