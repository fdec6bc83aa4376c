//! Acceptance gate: ten checks, each printing one `acceptance NN <name>:
//! PASS/FAIL` line with its pinned tolerance (run with `--nocapture` to see
//! the lines as they complete).
//!
//! Checks 1–6 verify exact invariants of the mechanism (CAM–logit identity,
//! gradient correctness and routing, supervision gating, metric oracles,
//! schedule/clipping). Checks 7–9 train real models and verify the three
//! desk-scale phenomena directionally over three seeds. Check 10 verifies
//! byte-level reproducibility of a train+eval pipeline.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskprior::eval::{
    coco_thresholds, dataset_to_gt, evaluate_by_ambiguity, evaluate_mask_ap,
    evaluate_prior_as_mask, ols, student_t_p_two_sided, Detection, EvalOptions, GtInstance,
};
use maskprior::graph::Graph;
use maskprior::model::{Model, ModelConfig, Variant};
use maskprior::pipeline::{analyze_overlap, detect_dataset, extract_prior_samples, evaluate_subsets};
use maskprior::synth::{generate_dataset, BitMask, ClassSplit, GenConfig};
use maskprior::tensor::Tensor;
use maskprior::train::{
    build_step_graph, clip_global_norm, examples_from_dataset, lr_at, make_mask_targets,
    sample_proposals, StepBatch, TrainConfig, Trainer, TrainExample,
};
use maskprior::{Model64, Scalar};

/// Print the per-criterion verdict line and fail the test on FAIL.
fn verdict(id: u32, name: &str, pass: bool, details: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {id:02} {name}: {word} — {details}");
    assert!(pass, "acceptance {id:02} {name}: FAIL — {details}");
}

/// Relative error with a small absolute floor so that exact zeros on both
/// sides compare clean.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ===================================================================== model
// Small configurations used by the exact-invariant checks. Every field is
// spelled out so a change of library defaults cannot silently change what
// these checks measure.

fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        stem_channels: 4,
        stage_channels: [4, 6, 8],
        fpn_channels: 6,
        box_channels: 8,
        box_convs: 2,
        mask_channels: 6,
        mask_convs: 2,
        box_roi: 5,
        mask_roi: 8,
        roi_sampling: 2,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        variant,
    }
}

/// Random image batch plus a hand-built RoI batch that exercises every loss
/// term: per image three foreground RoIs (classes 0, 1, 2), one background
/// RoI, and two mask-supervised rows.
fn synthetic_batch<S: Scalar>(
    cfg: &ModelConfig,
    num_images: usize,
    rng: &mut ChaCha8Rng,
) -> StepBatch<S> {
    let (h, w) = (32usize, 32usize);
    let images = Tensor::<S>::rand_uniform(&[num_images, 3, h, w], rng, -0.5, 0.5);
    let mut rois = Vec::new();
    let mut labels = Vec::new();
    let mut box_t: Vec<S> = Vec::new();
    let mut fg_rows = Vec::new();
    let mut sup_rows = Vec::new();
    let mut sup_classes = Vec::new();
    let rand_box = |rng: &mut ChaCha8Rng| -> [f64; 4] {
        let x0 = rng.gen_range(0.0..w as f64 - 8.0);
        let y0 = rng.gen_range(0.0..h as f64 - 8.0);
        let bw = rng.gen_range(5.0..(w as f64 - x0).min(20.0));
        let bh = rng.gen_range(5.0..(h as f64 - y0).min(20.0));
        [x0, y0, x0 + bw, y0 + bh]
    };
    for img in 0..num_images {
        for class in 0..3usize {
            let row = rois.len();
            rois.push((img, rand_box(rng)));
            labels.push(class);
            fg_rows.push(row);
            for _ in 0..4 {
                box_t.push(S::from_f64(rng.gen_range(-0.2..0.2)));
            }
            if class < 2 {
                sup_rows.push(row);
                sup_classes.push(class);
            }
        }
        rois.push((img, rand_box(rng)));
        labels.push(cfg.num_classes); // background
        box_t.extend([S::zero(); 4]);
    }
    let n = rois.len();
    let out = cfg.mask_out();
    let mask_on = cfg.variant.has_mask_head();
    if !mask_on {
        sup_rows.clear();
        sup_classes.clear();
    }
    let m = sup_rows.len();
    let bits: Vec<S> = (0..m * out * out)
        .map(|_| if rng.gen_bool(0.5) { S::one() } else { S::zero() })
        .collect();
    StepBatch {
        images,
        rois,
        labels,
        box_targets: Tensor::from_vec(&[n, 4], box_t),
        fg_rows,
        sup_rows,
        sup_classes,
        mask_targets: Tensor::from_vec(&[m, 1, out, out], bits),
    }
}

/// Loss value of one fixed batch under the model's current parameters.
fn loss_of<S: Scalar>(model: &Model<S>, batch: &StepBatch<S>) -> f64 {
    let sg = build_step_graph(model, batch).expect("loss graph builds");
    sg.graph.value(sg.total).item().to_f64_()
}

// ============================================================ 01 CAM identity

#[test]
fn c01_cam_logit_identity() {
    let started = Instant::now();
    let draws = 1000;
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let mut cfg = tiny_model_config(Variant::ClsOnly);
        cfg.box_convs = 1 + (draw % 3); // vary the conv stack depth too
        let model = Model64::new(cfg.clone(), 0xCA31 + draw as u64).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(draw as u64);
        let batch = synthetic_batch::<f64>(&cfg, 1, &mut rng);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let images = g.constant(batch.images.clone());
        let pyramid = model.backbone_fpn(&mut g, &bound, images).expect("backbone");
        let box_out = model.box_head(&mut g, &bound, &pyramid, &batch.rois);
        let cam = model.compute_cam(&mut g, &bound, box_out.f_box);
        let gap_cam = g.gap(cam);

        let logits = g.value(box_out.cls_logits).data().to_vec();
        let pooled = g.value(gap_cam).data().to_vec();
        let bias = model.params.param("head.cls.b").data().to_vec();
        let k = cfg.num_logits();
        assert_eq!(logits.len(), batch.rois.len() * k);
        for r in 0..batch.rois.len() {
            for c in 0..k {
                // Eq. 1 + GAP: spatial mean of the class-c CAM plus the
                // classifier bias reproduces the class-c logit.
                let e = rel_err(pooled[r * k + c] + bias[c], logits[r * k + c], 1e-6);
                worst = worst.max(e);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        "cam-logit identity",
        worst <= 1e-5 && secs < 60.0,
        &format!("max rel err {worst:.3e} ≤ 1e-5 over {draws} (params, input) draws, {secs:.1}s < 60s"),
    );
}

// ======================================================== 02 gradient checks

#[test]
fn c02_finite_difference_gradients() {
    let started = Instant::now();
    let cfg = tiny_model_config(Variant::Opmask);
    let mut model = Model64::new(cfg.clone(), 0xFD).expect("model");
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let batch = synthetic_batch::<f64>(&cfg, 2, &mut rng);

    // Analytic gradients for every parameter group.
    let sg = build_step_graph(&model, &batch).expect("graph");
    let mut grads = sg.graph.backward(sg.total);
    let names: Vec<String> = model.params.params().map(|(n, _)| n.clone()).collect();
    let mut analytic: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for name in &names {
        let var = sg.bound.var(name);
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(model.params.param(name).shape()));
        analytic.insert(name.clone(), g);
    }
    drop(sg);

    // Central difference at step `h`, restoring the parameter afterwards.
    let mut fd_at = |model: &mut Model<f64>, name: &str, idx: usize, h: f64| -> f64 {
        let theta = model.params.param(name).data()[idx];
        model.params.param_mut(name).data_mut()[idx] = theta + h;
        let up = loss_of(model, &batch);
        model.params.param_mut(name).data_mut()[idx] = theta - h;
        let down = loss_of(model, &batch);
        model.params.param_mut(name).data_mut()[idx] = theta;
        (up - down) / (2.0 * h)
    };

    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut probes = 0usize;
    let mut redrawn = 0usize;
    let probes_per_group = 3;
    for name in &names {
        let len = model.params.param(name).data().len();
        let mut valid = 0usize;
        for attempt in 0..4 * probes_per_group {
            if valid == probes_per_group.min(len) {
                break;
            }
            let idx = if len <= probes_per_group {
                (valid + attempt) % len
            } else {
                rng.gen_range(0..len)
            };
            let theta = model.params.param(name).data()[idx];
            // ε tuned per parameter scale.
            let h = 1e-5 * theta.abs().max(1.0);
            // The loss is piecewise smooth (ReLU kinks); a central difference
            // estimates nothing within `h` of a kink. Two step sizes that
            // disagree flag such a probe, which is re-drawn elsewhere in the
            // same group.
            let coarse = fd_at(&mut model, name, idx, h);
            let fine = fd_at(&mut model, name, idx, h / 4.0);
            if rel_err(coarse, fine, 1e-8) > 5e-4 {
                redrawn += 1;
                continue;
            }
            valid += 1;
            probes += 1;
            let ad = analytic[name].data()[idx];
            let e = rel_err(fine, ad, 1e-8);
            if e > worst {
                worst = e;
                worst_at = format!("{name}[{idx}]");
            }
        }
        assert!(valid > 0, "no smooth probe found for parameter group {name}");
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        2,
        "finite-difference gradients",
        worst <= 1e-3 && secs < 300.0,
        &format!(
            "max rel err {worst:.3e} ≤ 1e-3 (f64, worst at {worst_at}) over {} parameter groups, {probes} probes ({redrawn} re-drawn off ReLU kinks), {secs:.1}s < 300s",
            names.len()
        ),
    );
}

// ======================================================== 03 gradient routing

#[test]
fn c03_mask_gradients_route_through_box_head() {
    let draws = 200;
    let mut opmask_nonzero = 0usize;
    for draw in 0..draws {
        let run = |variant: Variant| -> (f64, f64) {
            let cfg = tiny_model_config(variant);
            let model = Model64::new(cfg.clone(), 0x0501 + draw as u64).expect("model");
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw as u64);
            let batch = synthetic_batch::<f64>(&cfg, 1, &mut rng);
            let sg = build_step_graph(&model, &batch).expect("graph");
            let l_mask = sg.l_mask.expect("mask branch ran");
            let mut grads = sg.graph.backward(l_mask);
            let mut box_convs = 0.0f64;
            let mut mask_convs = 0.0f64;
            for (name, var) in sg.bound.iter() {
                let Some(g) = grads.take(var) else { continue };
                let sq: f64 = g.data().iter().map(|&v| v * v).sum();
                if name.starts_with("box.conv") {
                    box_convs += sq;
                }
                if name.starts_with("mask.conv") {
                    mask_convs += sq;
                }
            }
            (box_convs, mask_convs)
        };

        let (op_box, op_mask) = run(Variant::Opmask);
        assert!(op_mask > 0.0, "draw {draw}: opmask mask-conv gradients vanished");
        if op_box > 0.0 {
            opmask_nonzero += 1;
        }

        let (bl_box, bl_mask) = run(Variant::Baseline);
        assert!(bl_mask > 0.0, "draw {draw}: baseline mask-conv gradients vanished");
        assert_eq!(
            bl_box, 0.0,
            "draw {draw}: baseline ∂L_mask/∂box-convs must be exactly zero"
        );
    }
    let frac = opmask_nonzero as f64 / draws as f64;
    verdict(
        3,
        "mask-to-box gradient routing",
        frac >= 0.99,
        &format!(
            "opmask ∂L_mask/∂box-convs nonzero on {opmask_nonzero}/{draws} draws ({:.1}% ≥ 99%); baseline exactly zero on all {draws}",
            frac * 100.0
        ),
    );
}

// ============================================================ 04 weak gating

#[test]
fn c04_weak_mask_targets_are_gated_out() {
    let gen = GenConfig {
        num_images: 10,
        height: 48,
        width: 48,
        num_classes: 8,
        min_instances: 2,
        max_instances: 4,
        radius_range: [5.0, 9.0],
        overlap_pressure: 0.6,
        seed: 7,
    };
    let ds = generate_dataset(&gen).expect("dataset");
    let examples = examples_from_dataset::<f32>(&ds).expect("examples");
    let split = ClassSplit::new(8, &[0, 1, 2, 3]).expect("split");

    // The same scenes with every weak-class mask inverted.
    let mutated: Vec<TrainExample<f32>> = examples
        .iter()
        .map(|ex| {
            let masks = ex
                .gts
                .iter()
                .zip(&ex.masks)
                .map(|(gt, m)| {
                    if split.is_strong(gt.class) {
                        m.clone()
                    } else {
                        BitMask::from_fn(m.height(), m.width(), |y, x| !m.get(y, x))
                    }
                })
                .collect();
            TrainExample { image: ex.image.clone(), gts: ex.gts.clone(), masks }
        })
        .collect();

    let mut cfg = tiny_model_config(Variant::Opmask);
    cfg.num_classes = 8;
    let model = Model::<f32>::new(cfg.clone(), 0x6A7E).expect("model");
    let train_cfg = TrainConfig::default();
    let out = cfg.mask_out();

    // Mirror of the trainer's batch assembly, so the two datasets see the
    // exact same RNG stream.
    let assemble = |data: &[TrainExample<f32>], seed: u64| -> StepBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut rois = Vec::new();
        let mut labels = Vec::new();
        let mut box_t: Vec<f32> = Vec::new();
        let mut fg_rows = Vec::new();
        let mut sup_rows = Vec::new();
        let mut sup_classes = Vec::new();
        let mut mask_bits: Vec<BitMask> = Vec::new();
        for bi in 0..2 {
            let ex = &data[rng.gen_range(0..data.len())];
            let (h, w) = (ex.image.dim(1), ex.image.dim(2));
            images.push(ex.image.clone());
            let rb = sample_proposals(&ex.gts, h, w, &split, &train_cfg.jitter, 1.0, &mut rng);
            let base = rois.len();
            for r in 0..rb.len() {
                rois.push((bi, rb.boxes[r]));
                labels.push(rb.labels[r]);
                box_t.extend(rb.box_targets[r].iter().map(|&v| v as f32));
            }
            fg_rows.extend(rb.fg_rows.iter().map(|&r| base + r));
            for (r, m) in make_mask_targets(&rb, &ex.masks, out) {
                sup_rows.push(base + r);
                sup_classes.push(rb.labels[r]);
                mask_bits.push(m);
            }
        }
        let n = rois.len();
        let images = maskprior::model::stack_images(&images).expect("stack");
        let mut mt: Vec<f32> = Vec::with_capacity(mask_bits.len() * out * out);
        for m in &mask_bits {
            mt.extend(m.pixels().iter().map(|&p| if p { 1.0 } else { 0.0 }));
        }
        StepBatch {
            images,
            rois,
            labels,
            box_targets: Tensor::from_vec(&[n, 4], box_t),
            fg_rows,
            sup_rows,
            sup_classes,
            mask_targets: Tensor::from_vec(&[mask_bits.len(), 1, out, out], mt),
        }
    };

    let trials = 100u64;
    let mut batches_with_masks = 0u64;
    for t in 0..trials {
        let a = assemble(&examples, 0xBA7C + t);
        let b = assemble(&mutated, 0xBA7C + t);
        if !a.sup_rows.is_empty() {
            batches_with_masks += 1;
        }

        let sga = build_step_graph(&model, &a).expect("graph a");
        let sgb = build_step_graph(&model, &b).expect("graph b");
        let va = [sga.l_cls, sga.l_box]
            .iter()
            .map(|&v| sga.graph.value(v).item())
            .collect::<Vec<f32>>();
        let vb = [sgb.l_cls, sgb.l_box]
            .iter()
            .map(|&v| sgb.graph.value(v).item())
            .collect::<Vec<f32>>();
        assert_eq!(va, vb, "trial {t}: cls/box losses diverged");
        match (sga.l_mask, sgb.l_mask) {
            (Some(la), Some(lb)) => {
                let (la, lb) = (sga.graph.value(la).item(), sgb.graph.value(lb).item());
                assert!(
                    la.to_bits() == lb.to_bits(),
                    "trial {t}: mask loss changed ({la} vs {lb})"
                );
            }
            (None, None) => {}
            _ => panic!("trial {t}: mask branch presence diverged"),
        }

        let mut ga = sga.graph.backward(sga.total);
        let mut gb = sgb.graph.backward(sgb.total);
        for ((name, va), (_, vb)) in sga.bound.iter().zip(sgb.bound.iter()) {
            let ta = ga.take(va);
            let tb = gb.take(vb);
            match (&ta, &tb) {
                (Some(ta), Some(tb)) => {
                    let same = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                    assert!(same, "trial {t}: gradient of {name} changed");
                }
                (None, None) => {}
                _ => panic!("trial {t}: gradient presence of {name} diverged"),
            }
        }
    }
    verdict(
        4,
        "weak-class gating invariance",
        batches_with_masks > trials / 2,
        &format!(
            "losses and every gradient component bit-exact across {trials} random batches with all weak-class masks inverted ({batches_with_masks} batches had mask supervision)"
        ),
    );
}

// ============================================================= 05 metric oracles

/// Straight-line brute-force mask-AP evaluator: same matching discipline as
/// the shipped convention (rank by score; greedy best-IoU-then-threshold;
/// ignored GTs absorb otherwise-unmatched detections; 101-point
/// interpolation), coded directly from that definition.
fn oracle_mask_ap(gt: &[GtInstance], det: &[Detection], opts: &EvalOptions) -> (f64, Vec<(usize, f64)>) {
    let mut classes: Vec<usize> = match &opts.classes {
        Some(cs) => cs.clone(),
        None => gt.iter().map(|g| g.class).collect(),
    };
    classes.sort_unstable();
    classes.dedup();
    classes.retain(|&c| gt.iter().any(|g| g.class == c && !g.ignore));

    let mut per_class = Vec::new();
    for &class in &classes {
        let gts: Vec<&GtInstance> = gt.iter().filter(|g| g.class == class).collect();
        let active = gts.iter().filter(|g| !g.ignore).count();
        let mut dets: Vec<&Detection> = det.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

        let mut ap_sum = 0.0;
        for &t in &opts.thresholds {
            ap_sum += if active == 0 { 0.0 } else {
                let mut used = vec![false; gts.len()];
                let mut hits: Vec<bool> = Vec::new();
                for d in &dets {
                    // Best-IoU unmatched live candidate in the same image.
                    let mut best_gi = None;
                    let mut best_iou = f64::NEG_INFINITY;
                    for (gi, g) in gts.iter().enumerate() {
                        if g.ignore || used[gi] || g.image_id != d.image_id {
                            continue;
                        }
                        let iou = d.mask.iou(&g.mask);
                        if iou > best_iou {
                            best_iou = iou;
                            best_gi = Some(gi);
                        }
                    }
                    match best_gi {
                        Some(gi) if best_iou >= t => {
                            used[gi] = true;
                            hits.push(true);
                        }
                        _ => {
                            let absorbed = gts.iter().any(|g| {
                                g.ignore
                                    && g.image_id == d.image_id
                                    && d.mask.iou(&g.mask) >= t
                            });
                            if !absorbed {
                                hits.push(false);
                            }
                        }
                    }
                }
                let mut tp = 0.0;
                let mut fp = 0.0;
                let mut pr: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
                for h in hits {
                    if h { tp += 1.0 } else { fp += 1.0 }
                    pr.push((tp / active as f64, tp / (tp + fp)));
                }
                let mut s = 0.0;
                for i in 0..=100 {
                    let r = i as f64 / 100.0;
                    let mut best = 0.0f64;
                    for &(rec, prec) in &pr {
                        if rec >= r && prec > best {
                            best = prec;
                        }
                    }
                    s += best;
                }
                s / 101.0
            };
        }
        per_class.push((class, ap_sum / opts.thresholds.len() as f64));
    }
    if per_class.is_empty() {
        return (0.0, per_class);
    }
    let mean = per_class.iter().map(|&(_, a)| a).sum::<f64>() / per_class.len() as f64;
    (mean, per_class)
}

/// Random rectangle mask on an integer lattice (exact IoU arithmetic).
fn rand_rect_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BitMask {
    let y0 = rng.gen_range(0..h - 1);
    let x0 = rng.gen_range(0..w - 1);
    let y1 = rng.gen_range(y0 + 1..=h.min(y0 + 7).max(y0 + 1));
    let x1 = rng.gen_range(x0 + 1..=w.min(x0 + 7).max(x0 + 1));
    BitMask::from_fn(h, w, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1)
}

#[test]
fn c05_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x05AC1E);
    let (h, w) = (12usize, 12usize);

    // --- mask AP vs brute force, exact, ≥200 randomized cases ------------
    let cases = 240;
    for case in 0..cases {
        let mut gt = Vec::new();
        let mut det = Vec::new();
        for image_id in 0..2u32 {
            for _ in 0..rng.gen_range(0..4) {
                let mask = rand_rect_mask(&mut rng, h, w);
                gt.push(GtInstance {
                    image_id,
                    class: rng.gen_range(0..3),
                    bbox: [0.0, 0.0, w as f64, h as f64],
                    mask,
                    ignore: rng.gen_bool(0.15),
                });
            }
            for _ in 0..rng.gen_range(0..6) {
                let mask = rand_rect_mask(&mut rng, h, w);
                det.push(Detection {
                    image_id,
                    class: rng.gen_range(0..3),
                    score: rng.gen_range(0.0..1.0),
                    bbox: [0.0, 0.0, w as f64, h as f64],
                    mask,
                });
            }
        }
        let opts = EvalOptions {
            thresholds: if case % 3 == 0 { coco_thresholds() } else { vec![0.5, 0.75] },
            classes: if case % 4 == 0 { Some(vec![0, 2]) } else { None },
        };
        let got = evaluate_mask_ap(&gt, &det, &opts);
        let (want_ap, want_per_class) = oracle_mask_ap(&gt, &det, &opts);
        assert_eq!(got.ap, want_ap, "case {case}: mean AP diverged from oracle");
        let got_pc: Vec<(usize, f64)> =
            got.per_class.iter().map(|c| (c.class, c.ap)).collect();
        assert_eq!(got_pc, want_per_class, "case {case}: per-class AP diverged");
    }

    // --- pairwise mask IoU vs integer counting, exact ---------------------
    let iou_pairs = 400;
    for _ in 0..iou_pairs {
        let a = rand_rect_mask(&mut rng, h, w);
        let b = rand_rect_mask(&mut rng, h, w);
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..h {
            for x in 0..w {
                inter += (a.get(y, x) && b.get(y, x)) as usize;
                union += (a.get(y, x) || b.get(y, x)) as usize;
            }
        }
        let want = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        assert_eq!(a.iou(&b), want, "mask IoU diverged from integer counting");
        assert_eq!(a.iou(&b), b.iou(&a), "mask IoU must be symmetric");
    }

    // --- OLS vs closed form (≤1e-10) and a frozen t-table (≤1e-10) --------
    let ols_cases = 200;
    let mut worst_ols = 0.0f64;
    for _ in 0..ols_cases {
        let n = rng.gen_range(5..40);
        let a = rng.gen_range(-2.0..2.0);
        let b = rng.gen_range(-3.0..3.0);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / 7.0 + rng.gen_range(-0.1..0.1)).collect();
        let y: Vec<f64> = x.iter().map(|&xi| a + b * xi + rng.gen_range(-0.3..0.3)).collect();
        let fit = ols(&x, &y).expect("fit");
        // Independent closed form through raw power sums.
        let nf = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxx = x.iter().map(|v| v * v).sum::<f64>();
        let syy = y.iter().map(|v| v * v).sum::<f64>();
        let sxy = x.iter().zip(&y).map(|(u, v)| u * v).sum::<f64>();
        let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
        let intercept = (sy - slope * sx) / nf;
        let r = (nf * sxy - sx * sy)
            / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        worst_ols = worst_ols
            .max(rel_err(fit.slope, slope, 1e-12))
            .max(rel_err(fit.intercept, intercept, 1e-12))
            .max(rel_err(fit.r, r, 1e-12));
    }
    assert!(worst_ols <= 1e-10, "OLS closed-form deviation {worst_ols:.3e} > 1e-10");

    // Two-sided p-values frozen from an independent statistics package.
    let t_table = [
        (2.5, 6.0, 0.0465282322841673),
        (1.0, 2.0, 0.422649730810374),
        (4.2, 10.0, 0.0018286964802676),
        (0.3, 3.0, 0.783763292039919),
        (12.0, 2.0, 0.00687293367715846),
        (2.776445104958225, 4.0, 0.0500000000122567),
    ];
    let mut worst_p = 0.0f64;
    for (t, nu, want) in t_table {
        worst_p = worst_p.max(rel_err(student_t_p_two_sided(t, nu), want, 1e-300));
    }
    assert!(worst_p <= 1e-10, "t-test deviation {worst_p:.3e} > 1e-10");

    verdict(
        5,
        "metric oracle equivalence",
        true,
        &format!(
            "mask AP exact on {cases} randomized cases; mask IoU exact on {iou_pairs} pairs; OLS ≤ 1e-10 on {ols_cases} fits (worst {worst_ols:.2e}) and 6 frozen p-values (worst {worst_p:.2e})"
        ),
    );
}

// ==================================================== 06 schedule and clipping

#[test]
fn c06_schedule_and_clipping() {
    // Warmup endpoint is exact for assorted bases and lengths.
    for &(base, warmup) in &[(0.01, 200usize), (0.3, 7), (0.02, 1), (1e-4, 1000)] {
        let end = lr_at(base, warmup, warmup.saturating_sub(1));
        assert!(
            end == base,
            "lr(warmup-1) must equal base exactly: got {end}, want {base}"
        );
        assert_eq!(lr_at(base, warmup, warmup), base, "post-warmup lr stays at base");
        let mut prev = 0.0;
        for it in 0..warmup + 3 {
            let lr = lr_at(base, warmup, it);
            assert!(lr >= prev, "warmup must be non-decreasing");
            assert!(lr <= base, "warmup must never exceed base");
            prev = lr;
        }
    }
    assert_eq!(lr_at(0.5, 0, 0), 0.5, "warmup 0 means constant lr");

    // Clipping: gradients of norms {0.5, 1, 5, 50} against max_norm 1. The
    // constructed norm carries rounding of order 1e-16, so the pass-through
    // assertion keys off the measured pre-clip norm.
    let mut details = Vec::new();
    for &norm in &[0.5f64, 1.0, 5.0, 50.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(norm.to_bits());
        let mut g = vec![
            Tensor::<f64>::rand_uniform(&[13], &mut rng, -1.0, 1.0),
            Tensor::<f64>::rand_uniform(&[3, 4], &mut rng, -1.0, 1.0),
        ];
        let raw: f64 = g.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum();
        let scale = norm / raw.sqrt();
        for t in &mut g {
            t.scale(scale);
        }
        let before: Vec<Vec<f64>> = g.iter().map(|t| t.data().to_vec()).collect();
        let (pre, post) = clip_global_norm(&mut g, 1.0);
        assert!((pre - norm).abs() < 1e-9, "constructed norm {norm}: measured {pre}");
        assert!(post <= 1.0 + 1e-6, "post-clip norm {post} exceeds 1 + 1e-6");
        if pre <= 1.0 {
            let untouched = g
                .iter()
                .zip(&before)
                .all(|(t, b)| t.data().iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(untouched, "norm {pre} ≤ max must pass through bit-exact");
        } else {
            assert!((post - 1.0).abs() <= 1e-9, "scaled norm must land on max_norm, got {post}");
        }
        details.push(format!("{norm}→{post:.6}"));
    }

    // Exact boundary: a gradient whose norm is exactly 1.0 in floating point
    // must pass through untouched.
    let mut g = vec![Tensor::<f64>::from_vec(&[3], vec![0.0, -1.0, 0.0])];
    let (pre, post) = clip_global_norm(&mut g, 1.0);
    assert_eq!((pre, post), (1.0, 1.0), "exact norm 1 must be measured exactly");
    assert_eq!(g[0].data(), &[0.0, -1.0, 0.0], "exact norm 1 must pass through");
    verdict(
        6,
        "schedule and clipping",
        true,
        &format!(
            "lr(warmup−1) = base exact on 4 schedules; post-clip norms {} all ≤ 1 + 1e-6, sub-threshold gradients untouched",
            details.join(", ")
        ),
    );
}

// ================================================== 07–09 phenomena fixture

/// Everything criteria 7–9 read for one (seed, variant) training run.
struct VariantOutcome {
    weak_ap: f64,
    ambiguous_ap: f64,
    non_ambiguous_ap: f64,
    overlap_slope: f64,
    prior_ap50: f64,
}

struct SeedOutcome {
    seed: u64,
    opmask: VariantOutcome,
    baseline: VariantOutcome,
    cls_only_prior_ap50: f64,
}

struct Phenomena {
    seeds: Vec<SeedOutcome>,
    train_secs: f64,
}

const PHEN_SEEDS: [u64; 3] = [11, 12, 13];
const PHEN_STRONG: [usize; 4] = [0, 1, 2, 3];
const PHEN_ITERS: usize = 900;

fn phen_gen_config() -> GenConfig {
    GenConfig {
        num_images: 80,
        height: 96,
        width: 96,
        num_classes: 8,
        min_instances: 3,
        max_instances: 6,
        radius_range: [9.0, 16.0],
        overlap_pressure: 0.7,
        seed: 99,
    }
}

fn phen_model_config(variant: Variant) -> ModelConfig {
    ModelConfig { variant, ..ModelConfig::default() }
}

fn phen_train_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        base_lr: 0.005,
        warmup_iters: 100,
        total_iters: PHEN_ITERS,
        batch_images: 4,
        strong_classes: PHEN_STRONG.to_vec(),
        checkpoint_every: PHEN_ITERS + 1,
        ..TrainConfig::default()
    }
}

fn train_variant(
    variant: Variant,
    seed: u64,
    examples: &[TrainExample<f32>],
) -> Model<f32> {
    let model = Model::<f32>::new(phen_model_config(variant), seed).expect("model");
    let mut trainer =
        Trainer::new(model, phen_train_config(variant, seed), examples.to_vec()).expect("trainer");
    let t0 = Instant::now();
    trainer.train(None).expect("training");
    eprintln!(
        "acceptance fixture: {variant} seed {seed} trained {PHEN_ITERS} iters in {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    trainer.model
}

fn phenomena() -> &'static Phenomena {
    static FIXTURE: OnceLock<Phenomena> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let ds = generate_dataset(&phen_gen_config()).expect("dataset");
        let gt = dataset_to_gt(&ds).expect("gt");
        let examples = examples_from_dataset::<f32>(&ds).expect("examples");
        let split = ClassSplit::new(8, &PHEN_STRONG).expect("split");
        let weak = split.weak();
        let thresholds = coco_thresholds();
        let weak_opts = EvalOptions {
            thresholds: thresholds.clone(),
            classes: Some(weak.clone()),
        };
        let prior_opts = EvalOptions { thresholds: thresholds.clone(), classes: None };
        let batch_images = 8;

        let mut seeds = Vec::new();
        for &seed in &PHEN_SEEDS {
            let outcome = |variant: Variant| -> VariantOutcome {
                let model = train_variant(variant, seed, &examples);
                let dets = detect_dataset(&model, &ds, batch_images).expect("detect");
                let subsets = evaluate_subsets(&gt, &dets, &split, &thresholds);
                let ambiguity =
                    evaluate_by_ambiguity(&gt, &dets, &weak_opts, 0.5);
                let overlap =
                    analyze_overlap(&gt, &dets, &weak, &thresholds).expect("overlap fit");
                let priors = extract_prior_samples(&model, &ds, batch_images).expect("priors");
                let prior_report =
                    evaluate_prior_as_mask(&gt, &priors, model.cfg.mask_roi, &prior_opts);
                VariantOutcome {
                    weak_ap: subsets.weak.ap,
                    ambiguous_ap: ambiguity.ambiguous.ap,
                    non_ambiguous_ap: ambiguity.non_ambiguous.ap,
                    overlap_slope: overlap.fit.slope,
                    prior_ap50: prior_report.ap50,
                }
            };
            let opmask = outcome(Variant::Opmask);
            let baseline = outcome(Variant::Baseline);

            // cls_only has no mask head; only its prior is scored.
            let model = train_variant(Variant::ClsOnly, seed, &examples);
            let priors = extract_prior_samples(&model, &ds, batch_images).expect("priors");
            let cls_only_prior_ap50 =
                evaluate_prior_as_mask(&gt, &priors, model.cfg.mask_roi, &prior_opts).ap50;

            seeds.push(SeedOutcome { seed, opmask, baseline, cls_only_prior_ap50 });
        }
        Phenomena { seeds, train_secs: started.elapsed().as_secs_f64() }
    })
}

#[test]
fn c07_phenomenon_a_weak_class_gains() {
    let phen = phenomena();
    let mut every_seed = true;
    let mut margin_votes = 0usize;
    let mut lines = Vec::new();
    for s in &phen.seeds {
        let gain = s.opmask.weak_ap - s.baseline.weak_ap;
        every_seed &= gain > 0.0;
        let amb_margin = s.opmask.ambiguous_ap - s.baseline.ambiguous_ap;
        let non_margin = s.opmask.non_ambiguous_ap - s.baseline.non_ambiguous_ap;
        if amb_margin > non_margin {
            margin_votes += 1;
        }
        lines.push(format!(
            "seed {}: weak AP {:.3} vs {:.3}, margin amb {:+.3} / non-amb {:+.3}",
            s.seed, s.opmask.weak_ap, s.baseline.weak_ap, amb_margin, non_margin
        ));
    }
    let within_budget = phen.train_secs < 3600.0;
    verdict(
        7,
        "phenomenon A (weak-class gains, ambiguity-concentrated)",
        every_seed && margin_votes >= 2 && within_budget,
        &format!(
            "opmask > baseline weak AP in 3/3 seeds: {}; ambiguous margin larger in {margin_votes}/3 (≥2 required); fixture trained in {:.0}s < 3600s",
            lines.join("; "),
            phen.train_secs
        ),
    );
}

#[test]
fn c08_phenomenon_b_overlap_slope() {
    let phen = phenomena();
    let mut baseline_negative = true;
    let mut closer_votes = 0usize;
    let mut lines = Vec::new();
    for s in &phen.seeds {
        baseline_negative &= s.baseline.overlap_slope < 0.0;
        if s.opmask.overlap_slope.abs() < s.baseline.overlap_slope.abs() {
            closer_votes += 1;
        }
        lines.push(format!(
            "seed {}: slope baseline {:+.3} / opmask {:+.3}",
            s.seed, s.baseline.overlap_slope, s.opmask.overlap_slope
        ));
    }
    verdict(
        8,
        "phenomenon B (overlap sensitivity flattens)",
        baseline_negative && closer_votes >= 2,
        &format!(
            "baseline slope negative in 3/3 seeds; opmask strictly closer to zero in {closer_votes}/3 (≥2 required); {}",
            lines.join("; ")
        ),
    );
}

#[test]
fn c09_phenomenon_c_prior_quality() {
    let phen = phenomena();
    let mut pass = true;
    let mut lines = Vec::new();
    for s in &phen.seeds {
        pass &= s.opmask.prior_ap50 > s.baseline.prior_ap50
            && s.opmask.prior_ap50 > s.cls_only_prior_ap50;
        lines.push(format!(
            "seed {}: AP50 opmask {:.3} / baseline {:.3} / cls_only {:.3}",
            s.seed, s.opmask.prior_ap50, s.baseline.prior_ap50, s.cls_only_prior_ap50
        ));
    }
    verdict(
        9,
        "phenomenon C (prior-as-mask ordering)",
        pass,
        &format!("opmask prior beats baseline and cls_only in every seed: {}", lines.join("; ")),
    );
}

// ========================================================= 10 reproducibility

#[test]
fn c10_train_eval_reproducibility() {
    let gen = GenConfig {
        num_images: 10,
        height: 64,
        width: 64,
        num_classes: 4,
        min_instances: 2,
        max_instances: 3,
        radius_range: [7.0, 11.0],
        overlap_pressure: 0.6,
        seed: 21,
    };
    let ds = generate_dataset(&gen).expect("dataset");
    let gt = dataset_to_gt(&ds).expect("gt");
    let examples = examples_from_dataset::<f32>(&ds).expect("examples");
    let cfg = ModelConfig {
        num_classes: 4,
        stem_channels: 4,
        stage_channels: [6, 8, 10],
        fpn_channels: 6,
        box_channels: 8,
        box_convs: 1,
        mask_channels: 6,
        mask_convs: 2,
        box_roi: 5,
        mask_roi: 10,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        seed: 3,
        total_iters: 120,
        warmup_iters: 12,
        batch_images: 2,
        strong_classes: vec![0, 1],
        checkpoint_every: 120,
        base_lr: 0.005,
        ..TrainConfig::default()
    };
    let split = ClassSplit::new(4, &[0, 1]).expect("split");

    let run = |dir: &std::path::Path| -> (Vec<u8>, Vec<u8>, String) {
        let model = Model::<f32>::new(cfg.clone(), 3).expect("model");
        let mut trainer =
            Trainer::new(model, train_cfg.clone(), examples.clone()).expect("trainer");
        trainer.train(Some(dir)).expect("train");
        let metrics = std::fs::read(dir.join("metrics.jsonl")).expect("metrics bytes");
        let ckpt = std::fs::read(dir.join("ckpt_120.bin")).expect("checkpoint bytes");
        let dets = detect_dataset(&trainer.model, &ds, 4).expect("detect");
        let report = evaluate_subsets(&gt, &dets, &split, &coco_thresholds());
        let json = serde_json::to_string(&report.all).expect("report json");
        (metrics, ckpt, json)
    };

    let tmp = tempfile::TempDir::new().expect("tempdir");
    let (m1, c1, j1) = run(&tmp.path().join("a"));
    let (m2, c2, j2) = run(&tmp.path().join("b"));
    let pass = m1 == m2 && c1 == c2 && j1 == j2;
    verdict(
        10,
        "train+eval reproducibility",
        pass,
        &format!(
            "re-run with same config and seed: metrics.jsonl ({} bytes), checkpoint ({} bytes), and eval report JSON ({} chars) all byte-identical on the single-threaded CPU substrate",
            m1.len(),
            c1.len(),
            j1.len()
        ),
    );
}
