//! The detection/segmentation model: a small strided backbone with a lite
//! feature pyramid, RoI feature extraction, a conv+GAP box head, the
//! class-activation foreground prior, and a class-agnostic mask head.
//!
//! The prior mechanism in one paragraph: the box head ends in global average
//! pooling followed by a linear classifier, so applying the classifier's
//! weight matrix at every spatial position of the pre-pooling feature map
//! (`compute_cam`) yields per-class activation maps whose spatial means equal
//! the classification logits minus the bias. One channel of that map — the
//! ground-truth class during training, the predicted class at inference — is
//! selected per RoI, bilinearly resized, and broadcast-added onto every
//! channel of the mask branch's RoI features (`inject_prior`). The mask head
//! then predicts a single class-agnostic mask. Because the prior is built
//! from box-head features, mask-loss gradients flow back into the box head.
//!
//! Three variants share this code:
//! * `opmask` — full prior path (select + inject);
//! * `baseline` — the mask head consumes the pyramid RoI features directly
//!   (no injection; mask gradients never reach the box head);
//! * `cls_only` — no mask head at all (classification + box regression).
//!
//! The class-activation map itself exists in every variant, since every
//! variant has a box head; only its *injection* differs.
//!
//! Class indexing: the dataset's `K` foreground classes occupy logit/CAM
//! channels `0..K` under their own ids; channel `K` is the background class.
//! The background channel is never selected as a prior.

pub mod params;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, RoiSpec, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use params::{kaiming_uniform, ParamStore};

/// Pyramid strides, fixed by the architecture (three levels).
pub const STRIDES: [usize; 3] = [4, 8, 16];

/// Which heads and which prior path exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Box head + mask head with the class-activation prior injected.
    Opmask,
    /// Box head + mask head fed pyramid features directly (no prior).
    Baseline,
    /// Box head only; requesting masks is an error.
    ClsOnly,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Opmask => "opmask",
            Variant::Baseline => "baseline",
            Variant::ClsOnly => "cls_only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "opmask" => Ok(Variant::Opmask),
            "baseline" => Ok(Variant::Baseline),
            "cls_only" => Ok(Variant::ClsOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected opmask | baseline | cls_only)"
            ))),
        }
    }

    /// Does this variant have a mask head?
    pub fn has_mask_head(self) -> bool {
        !matches!(self, Variant::ClsOnly)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of foreground classes `K` (logits have `K + 1` entries).
    pub num_classes: usize,
    /// Stem conv output channels (stride 2).
    pub stem_channels: usize,
    /// Output channels of the three stride-2 stages (strides 4, 8, 16).
    pub stage_channels: [usize; 3],
    /// Shared pyramid channel count `D`.
    pub fpn_channels: usize,
    /// Box-head conv channels `C`.
    pub box_channels: usize,
    /// Number of 3×3 convs in the box head.
    pub box_convs: usize,
    /// Mask-head conv channels.
    pub mask_channels: usize,
    /// Number of 3×3 conv+BN+ReLU blocks in the mask head.
    pub mask_convs: usize,
    /// Box-branch RoI size (7 at full scale).
    pub box_roi: usize,
    /// Mask-branch RoI size (14 at full scale); mask output is twice this.
    pub mask_roi: usize,
    /// Bilinear taps per output-cell axis in RoI align.
    pub roi_sampling: usize,
    pub bn_eps: f64,
    /// Running-statistics update rate (new = (1−m)·old + m·batch).
    pub bn_momentum: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            stem_channels: 16,
            stage_channels: [24, 32, 48],
            fpn_channels: 24,
            box_channels: 32,
            box_convs: 4,
            mask_channels: 24,
            mask_convs: 7,
            box_roi: 7,
            mask_roi: 14,
            roi_sampling: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            variant: Variant::Opmask,
        }
    }
}

impl ModelConfig {
    /// Logit / CAM channel count (`K` foreground classes + background).
    pub fn num_logits(&self) -> usize {
        self.num_classes + 1
    }

    /// Mask output resolution: always twice the mask RoI size (the head ends
    /// in one 2×2 stride-2 transposed convolution).
    pub fn mask_out(&self) -> usize {
        2 * self.mask_roi
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("stage_channels[0]", self.stage_channels[0]),
            ("stage_channels[1]", self.stage_channels[1]),
            ("stage_channels[2]", self.stage_channels[2]),
            ("fpn_channels", self.fpn_channels),
            ("box_channels", self.box_channels),
            ("box_convs", self.box_convs),
            ("mask_channels", self.mask_channels),
            ("mask_convs", self.mask_convs),
            ("box_roi", self.box_roi),
            ("mask_roi", self.mask_roi),
            ("roi_sampling", self.roi_sampling),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("model.bn_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("model.bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Output of the box head for a batch of RoIs.
pub struct BoxHeadOut {
    /// Pre-GAP conv features `[R, C, box_roi, box_roi]` — the CAM input.
    pub f_box: Var,
    /// `[R, K+1]` classification logits.
    pub cls_logits: Var,
    /// `[R, 4]` class-agnostic box deltas.
    pub box_deltas: Var,
}

/// A batch-norm node created during a training-mode mask-head forward; used
/// to fold the batch statistics into the running buffers afterwards.
pub struct BnNode {
    /// Buffer name prefix (`mask.bn3` → buffers `mask.bn3.rm` / `mask.bn3.rv`).
    pub prefix: String,
    pub var: Var,
}

/// Graph leaves for every trainable parameter, keyed by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Bound (name, leaf) pairs in deterministic order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}

/// Inference output for a batch of RoIs (see [`Model::infer`]).
pub struct InferOut {
    /// Softmax class probabilities, `[R][K+1]`.
    pub cls_probs: Vec<Vec<f64>>,
    /// Class-agnostic box deltas, `[R]`.
    pub box_deltas: Vec<[f64; 4]>,
    /// Selected prior map per RoI (resized to `mask_roi × mask_roi`, the
    /// injection-ready slice), raw values.
    pub priors: Vec<Vec<f64>>,
    /// Foreground class (0-based dataset class) whose CAM channel was
    /// selected for each RoI.
    pub prior_classes: Vec<usize>,
    /// Mask probabilities (`mask_out²` per RoI), if requested. `None` for an
    /// individual RoI means its predicted class was background, which drops
    /// it from the mask branch.
    pub masks: Option<Vec<Option<Vec<f64>>>>,
}

/// The model: a configuration plus named parameters/buffers.
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Create a model with deterministic, seed-driven initialization:
    /// fan-in-scaled uniform for conv weights, small uniform for the two
    /// linear heads, zeros for biases, identity for batch-norm.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k3 = |rng: &mut ChaCha8Rng, co: usize, ci: usize| -> Tensor<S> {
            kaiming_uniform(rng, &[co, ci, 3, 3], ci * 9)
        };

        // Backbone (creation order fixes RNG consumption; names sort freely).
        let st = cfg.stem_channels;
        let [s1, s2, s3] = cfg.stage_channels;
        p.insert_param("backbone.stem.w", k3(&mut rng, st, 3));
        p.insert_param("backbone.stem.b", Tensor::zeros(&[st]));
        p.insert_param("backbone.s1.w", k3(&mut rng, s1, st));
        p.insert_param("backbone.s1.b", Tensor::zeros(&[s1]));
        p.insert_param("backbone.s2a.w", k3(&mut rng, s2, s1));
        p.insert_param("backbone.s2a.b", Tensor::zeros(&[s2]));
        p.insert_param("backbone.s2b.w", k3(&mut rng, s2, s2));
        p.insert_param("backbone.s2b.b", Tensor::zeros(&[s2]));
        p.insert_param("backbone.s3a.w", k3(&mut rng, s3, s2));
        p.insert_param("backbone.s3a.b", Tensor::zeros(&[s3]));
        p.insert_param("backbone.s3b.w", k3(&mut rng, s3, s3));
        p.insert_param("backbone.s3b.b", Tensor::zeros(&[s3]));

        // Lateral 1×1 projections to the shared pyramid width.
        let d = cfg.fpn_channels;
        for (i, ci) in [s1, s2, s3].into_iter().enumerate() {
            p.insert_param(&format!("fpn.lat{i}.w"), kaiming_uniform(&mut rng, &[d, ci, 1, 1], ci));
            p.insert_param(&format!("fpn.lat{i}.b"), Tensor::zeros(&[d]));
        }

        // Box head.
        let c = cfg.box_channels;
        for i in 0..cfg.box_convs {
            let ci = if i == 0 { d } else { c };
            p.insert_param(&format!("box.conv{i}.w"), k3(&mut rng, c, ci));
            p.insert_param(&format!("box.conv{i}.b"), Tensor::zeros(&[c]));
        }
        let kl = cfg.num_logits();
        p.insert_param("head.cls.w", Tensor::rand_uniform(&[kl, c], &mut rng, -0.01, 0.01));
        p.insert_param("head.cls.b", Tensor::zeros(&[kl]));
        p.insert_param("head.box.w", Tensor::rand_uniform(&[4, c], &mut rng, -0.001, 0.001));
        p.insert_param("head.box.b", Tensor::zeros(&[4]));

        // Mask head (absent in the cls_only variant).
        if cfg.variant.has_mask_head() {
            let m = cfg.mask_channels;
            for i in 0..cfg.mask_convs {
                let ci = if i == 0 { d } else { m };
                p.insert_param(&format!("mask.conv{i}.w"), k3(&mut rng, m, ci));
                p.insert_param(&format!("mask.bn{i}.gamma"), Tensor::from_vec(&[m], vec![S::one(); m]));
                p.insert_param(&format!("mask.bn{i}.beta"), Tensor::zeros(&[m]));
                p.insert_buffer(&format!("mask.bn{i}.rm"), Tensor::zeros(&[m]));
                p.insert_buffer(&format!("mask.bn{i}.rv"), Tensor::from_vec(&[m], vec![S::one(); m]));
            }
            p.insert_param("mask.deconv.w", kaiming_uniform(&mut rng, &[m, m, 2, 2], m * 4));
            p.insert_param("mask.deconv.b", Tensor::zeros(&[m]));
            p.insert_param("mask.out.w", kaiming_uniform(&mut rng, &[1, m, 1, 1], m));
            p.insert_param("mask.out.b", Tensor::zeros(&[1]));
        }

        Ok(Model { cfg, params: p })
    }

    /// Rebuild a model around existing parameters (checkpoint restore).
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Create one graph leaf per trainable parameter.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        let vars = self
            .params
            .params()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    // ------------------------------------------------------------ backbone

    /// Run the backbone + lite pyramid on `[N, 3, H, W]` images (H, W must be
    /// divisible by 16). Returns the three levels at strides 4/8/16, each
    /// `[N, D, ·, ·]`.
    pub fn backbone_fpn(&self, g: &mut Graph<S>, b: &Bound, images: Var) -> Result<[Var; 3]> {
        let (_, ci, h, w) = g.value(images).dims4();
        if ci != 3 {
            return Err(Error::Model(format!("expected RGB input, got {ci} channels")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Model(format!(
                "input {h}x{w} not divisible by 16 (no implicit padding)"
            )));
        }
        let conv_relu = |g: &mut Graph<S>, x: Var, name: &str, stride: usize| -> Var {
            let y = g.conv2d(x, b.var(&format!("{name}.w")), Some(b.var(&format!("{name}.b"))), stride, 1);
            g.relu(y)
        };
        let stem = conv_relu(g, images, "backbone.stem", 2);
        let c2 = conv_relu(g, stem, "backbone.s1", 2);
        let t = conv_relu(g, c2, "backbone.s2a", 2);
        let c3 = conv_relu(g, t, "backbone.s2b", 1);
        let t = conv_relu(g, c3, "backbone.s3a", 2);
        let c4 = conv_relu(g, t, "backbone.s3b", 1);

        let lat = |g: &mut Graph<S>, x: Var, i: usize| -> Var {
            g.conv2d(x, b.var(&format!("fpn.lat{i}.w")), Some(b.var(&format!("fpn.lat{i}.b"))), 1, 0)
        };
        let p4 = lat(g, c4, 2);
        let up4 = g.upsample_nearest_2x(p4);
        let l3 = lat(g, c3, 1);
        let p3 = g.add(l3, up4);
        let up3 = g.upsample_nearest_2x(p3);
        let l2 = lat(g, c2, 0);
        let p2 = g.add(l2, up3);
        Ok([p2, p3, p4])
    }

    // ----------------------------------------------------------------- rois

    /// Pyramid level for an image-space box `[x0, y0, x1, y1]`: by box size,
    /// `level = clamp(floor(log2(sqrt(area) / 12)), 0, 2)` — boxes under 24 px
    /// read the stride-4 level, 24–48 px the stride-8 level, larger ones the
    /// stride-16 level.
    pub fn roi_level(&self, rect: [f64; 4]) -> usize {
        let side = ((rect[2] - rect[0]).max(0.0) * (rect[3] - rect[1]).max(0.0)).sqrt();
        if side <= 0.0 {
            return 0;
        }
        (side / 12.0).log2().floor().clamp(0.0, 2.0) as usize
    }

    /// Convert image-space RoIs `(image index, [x0, y0, x1, y1])` to pyramid
    /// RoI specs (feature coordinates of the assigned level).
    pub fn roi_specs(&self, rois: &[(usize, [f64; 4])]) -> Vec<RoiSpec> {
        rois.iter()
            .map(|&(img, rect)| {
                let level = self.roi_level(rect);
                let s = STRIDES[level] as f64;
                RoiSpec {
                    img,
                    level,
                    rect: [rect[0] / s, rect[1] / s, rect[2] / s, rect[3] / s],
                }
            })
            .collect()
    }

    // ------------------------------------------------------------- box head

    /// Box branch: RoI align at `box_roi`, the conv stack, then GAP and the
    /// two linear heads. `f_box` is the pre-GAP map that CAMs are computed
    /// from.
    pub fn box_head(&self, g: &mut Graph<S>, b: &Bound, pyramid: &[Var; 3], rois: &[(usize, [f64; 4])]) -> BoxHeadOut {
        let specs = self.roi_specs(rois);
        let mut x = g.roi_align(pyramid, specs, self.cfg.box_roi, self.cfg.roi_sampling);
        for i in 0..self.cfg.box_convs {
            let w = b.var(&format!("box.conv{i}.w"));
            let bias = b.var(&format!("box.conv{i}.b"));
            x = g.conv2d(x, w, Some(bias), 1, 1);
            x = g.relu(x);
        }
        let pooled = g.gap(x);
        let cls_logits = g.linear(pooled, b.var("head.cls.w"), Some(b.var("head.cls.b")));
        let box_deltas = g.linear(pooled, b.var("head.box.w"), Some(b.var("head.box.b")));
        BoxHeadOut { f_box: x, cls_logits, box_deltas }
    }

    /// Class-activation maps `[R, K+1, box_roi, box_roi]`: the classification
    /// weight matrix applied at every spatial position of `f_box` — no bias,
    /// no activation. The weight leaf is the *same* graph variable the
    /// classifier uses, so gradients from both paths accumulate on it.
    pub fn compute_cam(&self, g: &mut Graph<S>, b: &Bound, f_box: Var) -> Var {
        g.per_pixel_linear(f_box, b.var("head.cls.w"))
    }

    /// Select one CAM channel per RoI. `channels[r]` is a foreground class id
    /// (which is its own logit-channel index); selecting the background
    /// channel (`K`) is a contract violation.
    pub fn select_prior_slice(&self, g: &mut Graph<S>, cam: Var, channels: &[usize]) -> Var {
        assert!(
            channels.iter().all(|&c| c < self.cfg.num_classes),
            "prior selection must name a foreground channel"
        );
        g.index_channels(cam, channels.to_vec())
    }

    /// Inject a selected prior into mask-branch RoI features: bilinearly
    /// resize `[R, 1, box_roi, box_roi]` to the feature map's spatial size and
    /// broadcast-add it to every channel. Raw values — no normalization.
    pub fn inject_prior(&self, g: &mut Graph<S>, f_fpn: Var, selected: Var) -> Var {
        let (_, _, h, w) = g.value(f_fpn).dims4();
        let resized = g.bilinear_resize(selected, h, w);
        g.add_broadcast_chan(f_fpn, resized)
    }

    /// Mask-branch RoI features `[R, D, mask_roi, mask_roi]`.
    pub fn mask_features(&self, g: &mut Graph<S>, pyramid: &[Var; 3], rois: &[(usize, [f64; 4])]) -> Var {
        let specs = self.roi_specs(rois);
        g.roi_align(pyramid, specs, self.cfg.mask_roi, self.cfg.roi_sampling)
    }

    /// Mask head: `mask_convs` 3×3 conv + batch-norm + ReLU blocks, one 2×2
    /// stride-2 transposed conv (+ReLU), and a 1×1 conv to a single channel of
    /// logits `[R, 1, mask_out, mask_out]`. In training mode batch statistics
    /// are used and the produced batch-norm nodes are returned so the caller
    /// can roll them into the running buffers; in eval mode the stored
    /// running statistics are used. The input batch must be non-empty in
    /// training mode.
    pub fn mask_head(&self, g: &mut Graph<S>, b: &Bound, f_object: Var, training: bool) -> Result<(Var, Vec<BnNode>)> {
        if !self.cfg.variant.has_mask_head() {
            return Err(Error::Model("cls_only variant has no mask head".into()));
        }
        let eps = S::from_f64(self.cfg.bn_eps);
        let mut bn_nodes = Vec::new();
        let mut x = f_object;
        for i in 0..self.cfg.mask_convs {
            let w = b.var(&format!("mask.conv{i}.w"));
            x = g.conv2d(x, w, None, 1, 1);
            let gamma = b.var(&format!("mask.bn{i}.gamma"));
            let beta = b.var(&format!("mask.bn{i}.beta"));
            x = if training {
                let v = g.batch_norm(x, gamma, beta, None, eps);
                bn_nodes.push(BnNode { prefix: format!("mask.bn{i}"), var: v });
                v
            } else {
                let rm = self.params.buffer(&format!("mask.bn{i}.rm"));
                let rv = self.params.buffer(&format!("mask.bn{i}.rv"));
                g.batch_norm(x, gamma, beta, Some((rm, rv)), eps)
            };
            x = g.relu(x);
        }
        x = g.conv_transpose2x2(x, b.var("mask.deconv.w"), Some(b.var("mask.deconv.b")));
        x = g.relu(x);
        let logits = g.conv2d(x, b.var("mask.out.w"), Some(b.var("mask.out.b")), 1, 0);
        Ok((logits, bn_nodes))
    }

    /// Fold training-mode batch statistics into the running buffers:
    /// `rm ← (1−m)·rm + m·mean`, `rv ← (1−m)·rv + m·var`.
    pub fn update_bn_stats(&mut self, g: &Graph<S>, bn_nodes: &[BnNode]) {
        let m = S::from_f64(self.cfg.bn_momentum);
        let keep = S::one() - m;
        for node in bn_nodes {
            let (mean, var) = g.bn_batch_stats(node.var);
            let (mean, var) = (mean.clone(), var.clone());
            let rm = self.params.buffer_mut(&format!("{}.rm", node.prefix));
            for (r, &v) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = keep * *r + m * v;
            }
            let rv = self.params.buffer_mut(&format!("{}.rv", node.prefix));
            for (r, &v) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = keep * *r + m * v;
            }
        }
    }

    // ------------------------------------------------------------ inference

    /// Eval-mode forward for a batch of images and RoIs.
    ///
    /// * `cam_classes`: `Some(labels)` selects prior channels by the given
    ///   0-based foreground classes (label mode, used when probing priors at
    ///   ground-truth boxes); `None` selects by the predicted class (argmax
    ///   over foreground logits).
    /// * `want_masks`: run the mask branch. An error for the `cls_only`
    ///   variant. In predicted mode, RoIs whose overall argmax is the
    ///   background class are dropped from the mask branch (their mask is
    ///   `None`).
    pub fn infer(
        &self,
        images: &[Tensor<S>],
        rois: &[(usize, [f64; 4])],
        cam_classes: Option<&[usize]>,
        want_masks: bool,
    ) -> Result<InferOut> {
        if want_masks && !self.cfg.variant.has_mask_head() {
            return Err(Error::Model("cls_only variant cannot produce masks".into()));
        }
        if let Some(cs) = cam_classes {
            if cs.len() != rois.len() {
                return Err(Error::Model("cam_classes must pair with rois".into()));
            }
            if let Some(&bad) = cs.iter().find(|&&c| c >= self.cfg.num_classes) {
                return Err(Error::Model(format!("cam class {bad} out of range")));
            }
        }
        let batch = stack_images(images)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let imgs = g.leaf(batch, false);
        let pyramid = self.backbone_fpn(&mut g, &bound, imgs)?;
        let head = self.box_head(&mut g, &bound, &pyramid, rois);

        let kl = self.cfg.num_logits();
        let logits = g.value(head.cls_logits).data().to_vec();
        let cls_probs: Vec<Vec<f64>> = (0..rois.len())
            .map(|r| softmax_f64(&logits[r * kl..(r + 1) * kl]))
            .collect();
        let box_deltas: Vec<[f64; 4]> = {
            let d = g.value(head.box_deltas).data();
            (0..rois.len())
                .map(|r| {
                    let mut out = [0.0; 4];
                    for (o, &v) in out.iter_mut().zip(&d[r * 4..(r + 1) * 4]) {
                        *o = v.to_f64_();
                    }
                    out
                })
                .collect()
        };

        // Prior channel per RoI: supplied label, or predicted foreground class
        // (argmax over the K foreground channels; background is channel K).
        let prior_classes: Vec<usize> = match cam_classes {
            Some(cs) => cs.to_vec(),
            None => cls_probs
                .iter()
                .map(|p| {
                    let mut best = 0usize;
                    for c in 1..self.cfg.num_classes {
                        if p[c] > p[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect(),
        };

        let cam = self.compute_cam(&mut g, &bound, head.f_box);
        let (priors, masks) = if rois.is_empty() {
            (Vec::new(), want_masks.then(Vec::new))
        } else {
            let selected = self.select_prior_slice(&mut g, cam, &prior_classes);
            let mr = self.cfg.mask_roi;
            let resized = g.bilinear_resize(selected, mr, mr);
            let pd = g.value(resized).data();
            let priors: Vec<Vec<f64>> = (0..rois.len())
                .map(|r| pd[r * mr * mr..(r + 1) * mr * mr].iter().map(|v| v.to_f64_()).collect())
                .collect();

            let masks = if want_masks {
                // Background-argmax RoIs are dropped from the mask branch
                // (only possible in predicted mode).
                let active: Vec<usize> = (0..rois.len())
                    .filter(|&r| {
                        cam_classes.is_some() || {
                            let p = &cls_probs[r];
                            let bg = p[self.cfg.num_classes];
                            p[..self.cfg.num_classes].iter().any(|&v| v > bg)
                        }
                    })
                    .collect();
                let mut out: Vec<Option<Vec<f64>>> = vec![None; rois.len()];
                if !active.is_empty() {
                    let active_rois: Vec<(usize, [f64; 4])> = active.iter().map(|&r| rois[r]).collect();
                    let f_fpn = self.mask_features(&mut g, &pyramid, &active_rois);
                    let f_object = match self.cfg.variant {
                        Variant::Opmask => {
                            let sel = g.select_rows(selected, active.clone());
                            self.inject_prior(&mut g, f_fpn, sel)
                        }
                        Variant::Baseline => f_fpn,
                        Variant::ClsOnly => unreachable!("checked above"),
                    };
                    let (mask_logits, _) = self.mask_head(&mut g, &bound, f_object, false)?;
                    let md = g.value(mask_logits).data();
                    let mo = self.cfg.mask_out();
                    for (ai, &r) in active.iter().enumerate() {
                        let probs = md[ai * mo * mo..(ai + 1) * mo * mo]
                            .iter()
                            .map(|v| sigmoid_f64(v.to_f64_()))
                            .collect();
                        out[r] = Some(probs);
                    }
                }
                Some(out)
            } else {
                None
            };
            (priors, masks)
        };

        Ok(InferOut { cls_probs, box_deltas, priors, prior_classes, masks })
    }
}

/// Stack equally-sized `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images<S: Scalar>(images: &[Tensor<S>]) -> Result<Tensor<S>> {
    if images.is_empty() {
        return Err(Error::Model("empty image batch".into()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Model(format!("expected [3, H, W] images, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * images[0].data().len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Model("images in a batch must share a shape".into()));
        }
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::from_vec(&[images.len(), shape[0], shape[1], shape[2]], data))
}

/// Convert interleaved RGB bytes to a `[3, H, W]` tensor with values in
/// `[-0.5, 0.5]` (`v/255 - 0.5`).
pub fn image_to_tensor<S: Scalar>(rgb: &[u8], h: usize, w: usize) -> Tensor<S> {
    assert_eq!(rgb.len(), h * w * 3, "rgb byte length mismatch");
    let mut data = vec![S::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = rgb[(y * w + x) * 3 + ch] as f64 / 255.0 - 0.5;
                data[ch * h * w + y * w + x] = S::from_f64(v);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn softmax_f64<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64_()).collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
