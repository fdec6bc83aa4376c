//! End-to-end drivers between a trained model and the evaluation suite:
//! running inference over a stored dataset to produce mask detections,
//! probing the foreground prior at ground-truth boxes, detection
//! serialization, and the packaged analyses (subset AP, ambiguity split,
//! overlap-vs-AP regression).
//!
//! The evaluation protocol uses the ground-truth boxes as detection
//! candidates (there is no proposal network in this system): each GT box is
//! classified, boxes whose argmax is the background class are dropped, and
//! the rest are scored by their class confidence and given the mask head's
//! prediction pasted back into the box.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    evaluate_mask_ap, ols, per_class_overlap, ClassOverlap, Detection, EvalOptions, EvalReport,
    GtInstance, OlsFit, PriorSample,
};
use crate::model::{image_to_tensor, Model};
use crate::scalar::Scalar;
use crate::synth::{rle, BitMask, ClassSplit, Dataset, Rle};
use crate::tensor::lerp_coeff;

/// Paste a `side x side` grid of mask probabilities into an image-resolution
/// mask: every pixel whose center falls inside `bbox` samples the grid
/// bilinearly (half-pixel centers, clamped) and is set where the probability
/// is at least 0.5.
pub fn paste_mask_probs(
    probs: &[f64],
    side: usize,
    bbox: [f64; 4],
    img_h: usize,
    img_w: usize,
) -> BitMask {
    assert_eq!(probs.len(), side * side, "grid size mismatch");
    let [x0, y0, x1, y1] = bbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut m = BitMask::new(img_h, img_w);
    if bw <= 0.0 || bh <= 0.0 {
        return m;
    }
    let ylo = y0.floor().max(0.0) as usize;
    let yhi = (y1.ceil() as usize).min(img_h);
    let xlo = x0.floor().max(0.0) as usize;
    let xhi = (x1.ceil() as usize).min(img_w);
    for y in ylo..yhi {
        let cy = y as f64 + 0.5;
        if cy < y0 || cy >= y1 {
            continue;
        }
        let v = (cy - y0) / bh * side as f64 - 0.5;
        let (r0, r1, wy) = lerp_coeff(v, side);
        for x in xlo..xhi {
            let cx = x as f64 + 0.5;
            if cx < x0 || cx >= x1 {
                continue;
            }
            let u = (cx - x0) / bw * side as f64 - 0.5;
            let (c0, c1, wx) = lerp_coeff(u, side);
            let p = (1.0 - wy) * ((1.0 - wx) * probs[r0 * side + c0] + wx * probs[r0 * side + c1])
                + wy * ((1.0 - wx) * probs[r1 * side + c0] + wx * probs[r1 * side + c1]);
            if p >= 0.5 {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Annotation geometry of one image, prepared for inference.
struct ImageRois {
    index: usize,
    image_id: u32,
    h: usize,
    w: usize,
    /// `(annotation index in dataset order, box, class)`.
    anns: Vec<(usize, [f64; 4], usize)>,
}

fn dataset_rois(ds: &Dataset) -> Vec<ImageRois> {
    ds.json
        .images
        .iter()
        .enumerate()
        .map(|(i, rec)| ImageRois {
            index: i,
            image_id: rec.id,
            h: rec.height as usize,
            w: rec.width as usize,
            anns: ds
                .json
                .annotations
                .iter()
                .enumerate()
                .filter(|(_, a)| a.image_id == rec.id)
                .map(|(ai, a)| {
                    (ai, crate::eval::xywh_to_xyxy(a.bbox), a.category_id as usize - 1)
                })
                .collect(),
        })
        .filter(|ir| !ir.anns.is_empty())
        .collect()
}

/// Run mask inference over a dataset, using the GT boxes as candidates.
/// Boxes classified as background are dropped; the rest become detections
/// with the predicted class, the class confidence as score, and the mask
/// prediction pasted into the box. Fails for the `cls_only` variant, which
/// has no mask head.
pub fn detect_dataset<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    batch_images: usize,
) -> Result<Vec<Detection>> {
    assert!(batch_images > 0);
    if !model.cfg.variant.has_mask_head() {
        return Err(Error::Model(
            "the cls_only variant predicts no masks; nothing to evaluate".into(),
        ));
    }
    let mo = model.cfg.mask_out();
    let mut dets = Vec::new();
    for chunk in dataset_rois(ds).chunks(batch_images) {
        let images: Vec<_> =
            chunk.iter().map(|ir| image_to_tensor::<S>(&ds.images_rgb[ir.index], ir.h, ir.w)).collect();
        let mut rois = Vec::new();
        let mut meta = Vec::new(); // (image_id, bbox, img_h, img_w)
        for (bi, ir) in chunk.iter().enumerate() {
            for &(_, rect, _) in &ir.anns {
                rois.push((bi, rect));
                meta.push((ir.image_id, rect, ir.h, ir.w));
            }
        }
        let out = model.infer(&images, &rois, None, true)?;
        let masks = out.masks.as_ref().expect("masks were requested");
        for (r, &(image_id, bbox, h, w)) in meta.iter().enumerate() {
            let Some(probs) = &masks[r] else {
                continue; // background argmax: no detection
            };
            let class = out.prior_classes[r];
            dets.push(Detection {
                image_id,
                class,
                score: out.cls_probs[r][class],
                bbox,
                mask: paste_mask_probs(probs, mo, bbox, h, w),
            });
        }
    }
    Ok(dets)
}

/// Probe the foreground prior at every GT box, selecting the instance's own
/// class channel. Returns one sample per annotation, aligned with
/// [`crate::eval::dataset_to_gt`] order; the score is the box head's
/// confidence for that class. Works for every variant (the class-activation
/// map exists wherever a box head does).
pub fn extract_prior_samples<S: Scalar>(
    model: &Model<S>,
    ds: &Dataset,
    batch_images: usize,
) -> Result<Vec<PriorSample>> {
    assert!(batch_images > 0);
    let mut samples: Vec<Option<PriorSample>> = vec![None; ds.json.annotations.len()];
    for chunk in dataset_rois(ds).chunks(batch_images) {
        let images: Vec<_> =
            chunk.iter().map(|ir| image_to_tensor::<S>(&ds.images_rgb[ir.index], ir.h, ir.w)).collect();
        let mut rois = Vec::new();
        let mut classes = Vec::new();
        let mut ann_idx = Vec::new();
        for (bi, ir) in chunk.iter().enumerate() {
            for &(ai, rect, class) in &ir.anns {
                rois.push((bi, rect));
                classes.push(class);
                ann_idx.push(ai);
            }
        }
        let out = model.infer(&images, &rois, Some(&classes), false)?;
        for (r, &ai) in ann_idx.iter().enumerate() {
            samples[ai] = Some(PriorSample {
                values: out.priors[r].clone(),
                score: out.cls_probs[r][classes[r]],
            });
        }
    }
    samples
        .into_iter()
        .enumerate()
        .map(|(ai, s)| s.ok_or_else(|| Error::Eval(format!("annotation {ai} has no prior sample"))))
        .collect()
}

/// One detection as serialized to the detections JSONL.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u32,
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
    pub rle: Rle,
}

/// Write detections as JSONL, one object per line.
pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for d in dets {
        let rec = DetectionRecord {
            image_id: d.image_id,
            class_id: d.class,
            score: d.score,
            bbox: d.bbox,
            rle: rle::encode(&d.mask),
        };
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a detections JSONL file.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line)?;
        dets.push(Detection {
            image_id: rec.image_id,
            class: rec.class_id,
            score: rec.score,
            bbox: rec.bbox,
            mask: rle::decode(&rec.rle)?,
        });
    }
    Ok(dets)
}

/// Mask AP over all classes plus the strong and weak subsets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub all: EvalReport,
    pub strong_classes: Vec<usize>,
    pub strong: EvalReport,
    pub weak_classes: Vec<usize>,
    pub weak: EvalReport,
}

/// Evaluate mask AP on all classes and on the strong/weak subsets of a
/// class split.
pub fn evaluate_subsets(
    gt: &[GtInstance],
    dets: &[Detection],
    split: &ClassSplit,
    thresholds: &[f64],
) -> SubsetSummary {
    let with = |classes: Option<Vec<usize>>| {
        evaluate_mask_ap(gt, dets, &EvalOptions { thresholds: thresholds.to_vec(), classes })
    };
    SubsetSummary {
        all: with(None),
        strong_classes: split.strong().to_vec(),
        strong: with(Some(split.strong().to_vec())),
        weak_classes: split.weak(),
        weak: with(Some(split.weak())),
    }
}

/// Per-class overlap statistics regressed against per-class mask AP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlapAnalysis {
    /// Classes that entered the regression (those with GT instances).
    pub classes: Vec<usize>,
    /// Per-class mean of each instance's max box IoU against the other
    /// instances in its image (regressor).
    pub overlap: Vec<f64>,
    /// Per-class mask AP (response).
    pub ap: Vec<f64>,
    pub fit: OlsFit,
    /// Full overlap statistics, including the all-pairs aggregation variant.
    pub stats: Vec<ClassOverlap>,
}

/// Regress per-class mask AP on per-class box-overlap, over `classes`
/// (typically the weak subset). Needs at least three classes with instances.
pub fn analyze_overlap(
    gt: &[GtInstance],
    dets: &[Detection],
    classes: &[usize],
    thresholds: &[f64],
) -> Result<OverlapAnalysis> {
    let num_classes = gt.iter().map(|g| g.class).max().map_or(0, |m| m + 1);
    let stats = per_class_overlap(gt, num_classes);
    let report = evaluate_mask_ap(
        gt,
        dets,
        &EvalOptions { thresholds: thresholds.to_vec(), classes: Some(classes.to_vec()) },
    );
    let mut cs = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for cap in &report.per_class {
        cs.push(cap.class);
        xs.push(stats[cap.class].mean_max_iou);
        ys.push(cap.ap);
    }
    let fit = ols(&xs, &ys)?;
    Ok(OverlapAnalysis { classes: cs, overlap: xs, ap: ys, fit, stats })
}
