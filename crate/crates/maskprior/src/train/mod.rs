//! Training: batch assembly, the multi-task loss, and SGD with momentum
//! under a linear-warmup schedule with global gradient-norm clipping.
//!
//! Each iteration draws a batch of images, samples RoIs around the ground
//! truth ([`batch::sample_proposals`]), and optimizes
//!
//! * `l_cls` — softmax cross-entropy over `K+1` classes on every RoI,
//! * `l_box` — smooth-L1 box regression on foreground RoIs,
//! * `l_mask` — per-pixel binary cross-entropy on *supervised* RoIs only
//!   (foreground RoIs of strong classes); exactly zero when there are none.
//!
//! Gradients are clipped to the configured global norm *before* the momentum
//! update `v ← μ·v + g`, `p ← p − lr·v`. Every iteration's RNG is derived
//! from the root seed and the iteration index alone, so a run resumed from a
//! checkpoint replays the exact batches of an uninterrupted run.

pub mod batch;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou::xywh_to_xyxy;
use crate::graph::{Graph, Var};
use crate::model::{image_to_tensor, stack_images, BnNode, Bound, Model, Variant};
use crate::scalar::Scalar;
use crate::synth::{rle, splitmix64, BitMask, ClassSplit, Dataset, Scene};
use crate::tensor::Tensor;

pub use batch::{
    box_deltas, make_mask_targets, resample_mask_to_grid, sample_proposals, GtBox, JitterConfig,
    RoiBatch, FG_IOU_THRESH,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Training hyperparameters.
///
/// The defaults follow the linear-scaling rule: the reference recipe is
/// lr 0.02 at 16 images per batch with a 1000-iteration warmup, so at this
/// configuration's 8 images per batch the learning rate halves to 0.01, and
/// warmup shrinks proportionally with the shorter desk-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Must agree with the model's variant.
    pub variant: Variant,
    /// Peak learning rate, reached at the end of warmup.
    pub base_lr: f64,
    /// `lr(i) = base_lr · min(1, (i+1)/warmup_iters)`.
    pub warmup_iters: usize,
    pub total_iters: usize,
    /// Momentum coefficient; no weight decay is applied.
    pub momentum: f64,
    pub batch_images: usize,
    /// Global gradient-norm clip, applied before the momentum update.
    pub clip_norm: f64,
    /// Root seed; each iteration's RNG is derived from it and the iteration.
    pub seed: u64,
    /// Classes with mask supervision. All classes keep box supervision.
    pub strong_classes: Vec<usize>,
    pub jitter: JitterConfig,
    /// Background RoIs kept per foreground RoI.
    pub bg_ratio: f64,
    /// Checkpoint cadence in iterations; `0` means only the final checkpoint.
    /// The final checkpoint is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Opmask,
            base_lr: 0.01,
            warmup_iters: 200,
            total_iters: 3000,
            momentum: 0.9,
            batch_images: 8,
            clip_norm: 1.0,
            seed: 0,
            strong_classes: (0..4).collect(),
            jitter: JitterConfig::default(),
            bg_ratio: 3.0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_images == 0 || self.total_iters == 0 {
            return bad("batch_images and total_iters must be at least 1".into());
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !self.bg_ratio.is_finite() || self.bg_ratio < 0.0 {
            return bad(format!("bg_ratio must be non-negative, got {}", self.bg_ratio));
        }
        self.jitter.validate()
    }
}

/// Per-iteration metrics record, one JSONL object per line in
/// `metrics.jsonl`. `total` is always `l_cls + l_box + l_mask`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iter: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_box: f64,
    pub l_mask: f64,
    pub total: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

/// Linear warmup schedule: `base · min(1, (iter+1)/warmup)`. Exactly `base`
/// from `iter = warmup − 1` on (no floating-point residue at the endpoint).
pub fn lr_at(base: f64, warmup: usize, iter: usize) -> f64 {
    if warmup == 0 || iter + 1 >= warmup {
        base
    } else {
        base * (iter + 1) as f64 / warmup as f64
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before and after; gradients at or below the clip pass untouched.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> (f64, f64) {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let pre = grads.iter().map(|g| g.sq_l2()).sum::<f64>().sqrt();
    if pre > max_norm {
        let scale = S::from_f64(max_norm / pre);
        for g in grads.iter_mut() {
            g.scale(scale);
        }
    }
    let post = grads.iter().map(|g| g.sq_l2()).sum::<f64>().sqrt();
    (pre, post)
}

/// One image ready for training: normalized pixels, instance boxes/classes,
/// and the instances' *visible* masks (index-aligned with `gts`). Using
/// visible masks means pixels occluded by another instance are labeled
/// background in the occluded instance's own target.
#[derive(Clone, Debug)]
pub struct TrainExample<S: Scalar> {
    /// `[3, H, W]`, values in `[-0.5, 0.5]`.
    pub image: Tensor<S>,
    pub gts: Vec<GtBox>,
    pub masks: Vec<BitMask>,
}

impl<S: Scalar> TrainExample<S> {
    /// Convert an in-memory scene; `None` if no instance has visible pixels.
    pub fn from_scene(scene: &Scene) -> Option<Self> {
        let image = image_to_tensor(&scene.rgb, scene.height, scene.width);
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for obj in &scene.objects {
            if let Some(bb) = obj.visible.bbox() {
                gts.push(GtBox { rect: xywh_to_xyxy(bb), class: obj.instance.class });
                masks.push(obj.visible.clone());
            }
        }
        if gts.is_empty() {
            return None;
        }
        Some(TrainExample { image, gts, masks })
    }
}

/// Decode a stored dataset into training examples. Images without usable
/// annotations are dropped; an entirely empty result is an error.
pub fn examples_from_dataset<S: Scalar>(ds: &Dataset) -> Result<Vec<TrainExample<S>>> {
    let mut out = Vec::new();
    for (i, rec) in ds.json.images.iter().enumerate() {
        let (h, w) = (rec.height as usize, rec.width as usize);
        let image = image_to_tensor::<S>(&ds.images_rgb[i], h, w);
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for ann in ds.json.annotations.iter().filter(|a| a.image_id == rec.id) {
            let mask = rle::decode(&ann.rle)?;
            if mask.height() != h || mask.width() != w {
                return Err(Error::Dataset(format!(
                    "annotation {} mask is {}x{}, image {} is {}x{}",
                    ann.id,
                    mask.height(),
                    mask.width(),
                    rec.id,
                    h,
                    w
                )));
            }
            gts.push(GtBox { rect: xywh_to_xyxy(ann.bbox), class: ann.category_id as usize - 1 });
            masks.push(mask);
        }
        if !gts.is_empty() {
            out.push(TrainExample { image, gts, masks });
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset("dataset holds no annotated images".into()));
    }
    Ok(out)
}

/// Assembled inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch<S: Scalar> {
    /// Stacked images `[B, 3, H, W]`.
    pub images: Tensor<S>,
    /// `(image index within the batch, box)` per RoI.
    pub rois: Vec<(usize, [f64; 4])>,
    /// Class labels per RoI; background is `K`.
    pub labels: Vec<usize>,
    /// `[N, 4]` regression targets; zero (and unread) for background rows.
    pub box_targets: Tensor<S>,
    pub fg_rows: Vec<usize>,
    /// Rows with mask supervision, ascending. Empty for the `cls_only`
    /// variant regardless of the split.
    pub sup_rows: Vec<usize>,
    /// Foreground class per supervised row (selects the prior channel).
    pub sup_classes: Vec<usize>,
    /// `[len(sup_rows), 1, out, out]` binary grids.
    pub mask_targets: Tensor<S>,
}

/// A built loss graph, ready for a value read and a backward pass.
pub struct StepGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub bound: Bound,
    pub l_cls: Var,
    pub l_box: Var,
    /// `None` when the mask branch did not run (cls_only, or no supervised
    /// rows this step).
    pub l_mask: Option<Var>,
    pub total: Var,
    pub bn_nodes: Vec<BnNode>,
}

/// Build the full multi-task loss graph for one step. The mask branch runs
/// only when the variant has a mask head and the batch has supervised rows;
/// under `opmask` the supervised rows' class-activation slices are injected
/// into the mask features, under `baseline` the features pass unchanged.
pub fn build_step_graph<S: Scalar>(model: &Model<S>, batch: &StepBatch<S>) -> Result<StepGraph<S>> {
    let n = batch.rois.len();
    let mis = |what: &str| Error::Train(format!("misaligned batch: {what}"));
    if n == 0 {
        return Err(mis("no RoIs"));
    }
    if batch.labels.len() != n {
        return Err(mis("labels do not cover the RoIs"));
    }
    if batch.box_targets.shape() != [n, 4] {
        return Err(mis("box targets do not cover the RoIs"));
    }
    if batch.fg_rows.iter().chain(&batch.sup_rows).any(|&r| r >= n) {
        return Err(mis("row index out of range"));
    }
    if batch.sup_classes.len() != batch.sup_rows.len() {
        return Err(mis("supervised classes do not cover the supervised rows"));
    }
    let out = model.cfg.mask_out();
    if batch.mask_targets.shape() != [batch.sup_rows.len(), 1, out, out] {
        return Err(mis("mask targets do not cover the supervised rows"));
    }
    if !model.cfg.variant.has_mask_head() && !batch.sup_rows.is_empty() {
        return Err(mis("supervised rows in a cls_only batch"));
    }

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let images = g.constant(batch.images.clone());
    let pyramid = model.backbone_fpn(&mut g, &bound, images)?;
    let box_out = model.box_head(&mut g, &bound, &pyramid, &batch.rois);
    let l_cls = g.softmax_ce(box_out.cls_logits, batch.labels.clone());
    let l_box = g.smooth_l1(box_out.box_deltas, batch.box_targets.clone(), batch.fg_rows.clone());

    let mut terms = vec![l_cls, l_box];
    let mut l_mask = None;
    let mut bn_nodes = Vec::new();
    if model.cfg.variant.has_mask_head() && !batch.sup_rows.is_empty() {
        let sup_rois: Vec<(usize, [f64; 4])> =
            batch.sup_rows.iter().map(|&r| batch.rois[r]).collect();
        let f_fpn = model.mask_features(&mut g, &pyramid, &sup_rois);
        let f_object = match model.cfg.variant {
            Variant::Opmask => {
                let cam = model.compute_cam(&mut g, &bound, box_out.f_box);
                let cam_sup = g.select_rows(cam, batch.sup_rows.clone());
                let selected = model.select_prior_slice(&mut g, cam_sup, &batch.sup_classes);
                model.inject_prior(&mut g, f_fpn, selected)
            }
            Variant::Baseline => f_fpn,
            Variant::ClsOnly => unreachable!("guarded by has_mask_head"),
        };
        let (mask_logits, nodes) = model.mask_head(&mut g, &bound, f_object, true)?;
        let lm = g.bce_logits(mask_logits, batch.mask_targets.clone());
        terms.push(lm);
        l_mask = Some(lm);
        bn_nodes = nodes;
    }
    let total = g.sum_scalars(&terms);
    Ok(StepGraph { graph: g, bound, l_cls, l_box, l_mask, total, bn_nodes })
}

/// The per-iteration RNG is a pure function of the root seed and the
/// iteration index, so training is reproducible and checkpoint-resumable.
fn step_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0x5EED ^ iter as u64)))
}

/// SGD-with-momentum training driver.
#[derive(Debug)]
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub cfg: TrainConfig,
    split: ClassSplit,
    momentum: BTreeMap<String, Tensor<S>>,
    data: Vec<TrainExample<S>>,
    iter: usize,
}

fn validate_examples<S: Scalar>(model: &Model<S>, data: &[TrainExample<S>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training needs at least one example".into()));
    }
    let shape = data[0].image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] % 16 != 0 || shape[2] % 16 != 0 {
        return Err(Error::Config(format!(
            "images must be [3, H, W] with H, W divisible by 16, got {shape:?}"
        )));
    }
    for (i, ex) in data.iter().enumerate() {
        if ex.image.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "example {i} has shape {:?}, expected {shape:?}",
                ex.image.shape()
            )));
        }
        if ex.gts.is_empty() {
            return Err(Error::Config(format!("example {i} has no instances")));
        }
        if ex.gts.len() != ex.masks.len() {
            return Err(Error::Config(format!("example {i}: boxes and masks misaligned")));
        }
        if let Some(gt) = ex.gts.iter().find(|gt| gt.class >= model.cfg.num_classes) {
            return Err(Error::Config(format!(
                "example {i} names class {} but the model has {} classes",
                gt.class, model.cfg.num_classes
            )));
        }
    }
    Ok(())
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig, data: Vec<TrainExample<S>>) -> Result<Self> {
        cfg.validate()?;
        if model.cfg.variant != cfg.variant {
            return Err(Error::Config(format!(
                "model variant {} does not match training variant {}",
                model.cfg.variant, cfg.variant
            )));
        }
        let split = ClassSplit::new(model.cfg.num_classes, &cfg.strong_classes)?;
        validate_examples(&model, &data)?;
        let momentum = model
            .params
            .params()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Ok(Trainer { model, cfg, split, momentum, data, iter: 0 })
    }

    /// Resume from a checkpoint; replays the exact remaining schedule of an
    /// uninterrupted run over the same data.
    pub fn from_checkpoint(ck: Checkpoint<S>, data: Vec<TrainExample<S>>) -> Result<Self> {
        let Checkpoint { model_cfg, train_cfg, iteration, store, momentum } = ck;
        train_cfg.validate()?;
        let model = Model::from_parts(model_cfg, store)?;
        if model.cfg.variant != train_cfg.variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint model variant {} does not match its training variant {}",
                model.cfg.variant, train_cfg.variant
            )));
        }
        let split = ClassSplit::new(model.cfg.num_classes, &train_cfg.strong_classes)?;
        validate_examples(&model, &data)?;
        Ok(Trainer { model, cfg: train_cfg, split, momentum, data, iter: iteration })
    }

    /// Snapshot the full training state.
    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            model_cfg: self.model.cfg.clone(),
            train_cfg: self.cfg.clone(),
            iteration: self.iter,
            store: self.model.params.clone(),
            momentum: self.momentum.clone(),
        }
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn split(&self) -> &ClassSplit {
        &self.split
    }

    fn assemble_batch(&self, rng: &mut ChaCha8Rng) -> StepBatch<S> {
        let out = self.model.cfg.mask_out();
        let mask_on = self.model.cfg.variant.has_mask_head();
        let mut images = Vec::with_capacity(self.cfg.batch_images);
        let mut rois = Vec::new();
        let mut labels = Vec::new();
        let mut box_t: Vec<S> = Vec::new();
        let mut fg_rows = Vec::new();
        let mut sup_rows = Vec::new();
        let mut sup_classes = Vec::new();
        let mut mask_bits: Vec<BitMask> = Vec::new();

        for bi in 0..self.cfg.batch_images {
            let ex = &self.data[rng.gen_range(0..self.data.len())];
            let (h, w) = (ex.image.dim(1), ex.image.dim(2));
            images.push(ex.image.clone());
            let rb = sample_proposals(
                &ex.gts,
                h,
                w,
                &self.split,
                &self.cfg.jitter,
                self.cfg.bg_ratio,
                rng,
            );
            let base = rois.len();
            for r in 0..rb.len() {
                rois.push((bi, rb.boxes[r]));
                labels.push(rb.labels[r]);
                box_t.extend(rb.box_targets[r].iter().map(|&v| S::from_f64(v)));
            }
            fg_rows.extend(rb.fg_rows.iter().map(|&r| base + r));
            if mask_on {
                for (r, m) in make_mask_targets(&rb, &ex.masks, out) {
                    sup_rows.push(base + r);
                    sup_classes.push(rb.labels[r]);
                    mask_bits.push(m);
                }
            }
        }

        let n = rois.len();
        let images = stack_images(&images).expect("examples were validated to share one shape");
        let box_targets = Tensor::from_vec(&[n, 4], box_t);
        let mut mt: Vec<S> = Vec::with_capacity(mask_bits.len() * out * out);
        for m in &mask_bits {
            mt.extend(m.pixels().iter().map(|&p| if p { S::one() } else { S::zero() }));
        }
        let mask_targets = Tensor::from_vec(&[mask_bits.len(), 1, out, out], mt);
        StepBatch { images, rois, labels, box_targets, fg_rows, sup_rows, sup_classes, mask_targets }
    }

    /// One optimization step: assemble a batch, evaluate the loss, backprop,
    /// clip, and apply the momentum update. Fails on a non-finite loss with
    /// the full breakdown in the message.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let it = self.iter;
        if it >= self.cfg.total_iters {
            return Err(Error::Train(format!(
                "iteration {it} is past the schedule end ({})",
                self.cfg.total_iters
            )));
        }
        let mut rng = step_rng(self.cfg.seed, it);
        let batch = self.assemble_batch(&mut rng);
        let sg = build_step_graph(&self.model, &batch)?;
        let l_cls = sg.graph.value(sg.l_cls).item().to_f64_();
        let l_box = sg.graph.value(sg.l_box).item().to_f64_();
        let l_mask = sg.l_mask.map_or(0.0, |v| sg.graph.value(v).item().to_f64_());
        // Recorded in f64 so the invariant total = l_cls + l_box + l_mask is
        // exact even when the optimization objective sums in f32.
        let total = l_cls + l_box + l_mask;
        if !(l_cls.is_finite() && l_box.is_finite() && l_mask.is_finite() && total.is_finite()) {
            return Err(Error::Train(format!(
                "non-finite loss at iteration {it}: l_cls={l_cls} l_box={l_box} l_mask={l_mask} total={total}"
            )));
        }

        let mut grads = sg.graph.backward(sg.total);
        let mut names: Vec<String> = Vec::with_capacity(self.model.params.num_params());
        let mut gvec: Vec<Tensor<S>> = Vec::with_capacity(names.capacity());
        for (name, var) in sg.bound.iter() {
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(self.model.params.param(name).shape()));
            names.push(name.clone());
            gvec.push(g);
        }
        let (grad_norm_pre, grad_norm_post) = clip_global_norm(&mut gvec, self.cfg.clip_norm);
        if !grad_norm_pre.is_finite() {
            return Err(Error::Train(format!(
                "non-finite gradient norm at iteration {it} (pre-clip {grad_norm_pre}): \
                 l_cls={l_cls} l_box={l_box} l_mask={l_mask}"
            )));
        }

        let lr = lr_at(self.cfg.base_lr, self.cfg.warmup_iters, it);
        let mu = S::from_f64(self.cfg.momentum);
        let neg_lr = -S::from_f64(lr);
        for (name, g) in names.iter().zip(&gvec) {
            let v = self.momentum.get_mut(name).expect("momentum buffer exists per param");
            v.scale(mu);
            v.add_scaled(g, S::one());
            self.model.params.param_mut(name).add_scaled(v, neg_lr);
        }
        self.model.update_bn_stats(&sg.graph, &sg.bn_nodes);
        self.iter += 1;

        Ok(LossBreakdown { iter: it, lr, l_cls, l_box, l_mask, total, grad_norm_pre, grad_norm_post })
    }

    /// Run the remaining schedule. With an output directory, appends one
    /// JSONL record per iteration to `metrics.jsonl` and writes periodic and
    /// final checkpoints as `ckpt_{iter}.bin`. A failing step appends a
    /// diagnostic record before the error propagates.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<Vec<LossBreakdown>> {
        self.train_with(out_dir, |_| {})
    }

    /// [`Self::train`] with a per-iteration observer (progress reporting).
    /// The observer runs after the record is written, so it cannot perturb
    /// the emitted metrics.
    pub fn train_with(
        &mut self,
        out_dir: Option<&Path>,
        mut on_record: impl FnMut(&LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        let mut metrics = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.cfg.total_iters - self.iter);
        while self.iter < self.cfg.total_iters {
            match self.step() {
                Ok(rec) => {
                    if let Some(f) = metrics.as_mut() {
                        serde_json::to_writer(&mut *f, &rec)?;
                        writeln!(f)?;
                    }
                    if let Some(dir) = out_dir {
                        let done = self.iter;
                        let periodic =
                            self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0;
                        if periodic || done == self.cfg.total_iters {
                            self.checkpoint().save(&dir.join(format!("ckpt_{done}.bin")))?;
                        }
                    }
                    on_record(&rec);
                    records.push(rec);
                }
                Err(e) => {
                    if let Some(f) = metrics.as_mut() {
                        let diag = serde_json::json!({ "iter": self.iter, "error": e.to_string() });
                        serde_json::to_writer(&mut *f, &diag)?;
                        writeln!(f)?;
                        f.flush()?;
                    }
                    return Err(e);
                }
            }
        }
        if let Some(f) = metrics.as_mut() {
            f.flush()?;
        }
        Ok(records)
    }
}
