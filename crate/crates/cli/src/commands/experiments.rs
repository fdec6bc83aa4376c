//! `compare-priors` and `sweep-splits`: multi-run experiment drivers.
//!
//! `compare-priors` trains the three variants on one dataset and scores
//! each one's foreground prior as a segmentation mask at the GT boxes.
//! `sweep-splits` re-trains the configured variant while growing the
//! strong-class set, reporting weak-class AP per (count, seed); runs are
//! dispatched to a bounded worker pool, isolated by output directory.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use maskprior::error::{Error, Result};
use maskprior::eval::{
    dataset_to_gt, evaluate_prior_as_mask, EvalOptions, EvalReport, GtInstance,
};
use maskprior::model::Variant;
use maskprior::pipeline::{detect_dataset, evaluate_subsets, write_detections};
use maskprior::synth::{ClassSplit, Dataset};
use serde::{Deserialize, Serialize};

use crate::commands::train::train_into;
use crate::commands::{
    parse_classes, resolve_dataset, runtime, usage, with_stage, CmdResult, SweepAgg, SweepDoc,
    SweepRow,
};
use crate::config::{load_config, ExperimentConfig, Overrides};
use crate::record::{blob_hash, dataset_hash, write_json_atomic, Stage};

pub struct PriorsArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// One variant's prior-as-mask evaluation.
#[derive(Serialize, Deserialize)]
pub struct PriorResult {
    pub variant: String,
    /// Side length of the evaluated prior grid.
    pub prior_side: usize,
    pub report: EvalReport,
}

/// `compare_priors.json`.
#[derive(Serialize, Deserialize)]
pub struct ComparePriorsDoc {
    pub config_hash: String,
    pub dataset_hash: String,
    pub results: Vec<PriorResult>,
}

pub fn run_priors(args: &PriorsArgs) -> CmdResult {
    let ovr = Overrides { seed: args.seed, ..Default::default() };
    let cfg = load_config(&args.config, &ovr).map_err(usage)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());

    let stage = Stage::new("compare-priors", &out).map_err(runtime)?;
    with_stage(stage, |stage| {
        stage.config_hash = blob_hash(cfg.snapshot()?.as_bytes());
        let ds = resolve_dataset(&cfg)?;
        stage.dataset_hash = dataset_hash(&ds)?;
        let gt = dataset_to_gt(&ds)?;
        let opts = EvalOptions { thresholds: cfg.eval.thresholds.clone(), classes: None };

        let mut results = Vec::new();
        for variant in [Variant::ClsOnly, Variant::Baseline, Variant::Opmask] {
            let mut sub = cfg.clone();
            sub.model.variant = variant;
            sub.train.variant = variant;
            let dir = stage.artifact(variant.as_str());
            eprintln!("[compare-priors] training {variant}...");
            let run = train_into(&sub, &ds, &dir, true)?;
            std::fs::write(dir.join("config.snapshot"), sub.snapshot()?)?;

            let model = run.trainer.checkpoint().into_model()?;
            let samples =
                maskprior::pipeline::extract_prior_samples(&model, &ds, cfg.eval.batch_images)?;
            let report = evaluate_prior_as_mask(&gt, &samples, model.cfg.mask_roi, &opts);
            eprintln!("[compare-priors] {variant}: prior-as-mask AP50 {:.4}", report.ap50);
            results.push(PriorResult {
                variant: variant.as_str().to_owned(),
                prior_side: model.cfg.mask_roi,
                report,
            });
        }

        let line = results
            .iter()
            .map(|r| format!("{} {:.4}", r.variant, r.report.ap50))
            .collect::<Vec<_>>()
            .join("  ");
        println!("prior-as-mask AP50:  {line}");
        let doc = ComparePriorsDoc {
            config_hash: stage.config_hash.clone(),
            dataset_hash: stage.dataset_hash.clone(),
            results,
        };
        write_json_atomic(&stage.artifact("compare_priors.json"), &doc)
    })
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub counts: String,
    pub seeds: usize,
    pub jobs: usize,
}

pub fn run_sweep(args: &SweepArgs) -> CmdResult {
    let ovr = Overrides { seed: args.seed, ..Default::default() };
    let cfg = load_config(&args.config, &ovr).map_err(usage)?;
    let counts = parse_classes(&args.counts).map_err(usage)?;
    if counts.is_empty() {
        return Err(usage("--counts must name at least one strong-class count"));
    }
    for &c in &counts {
        ClassSplit::first_n(cfg.model.num_classes, c).map_err(usage)?;
    }
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());

    let stage = Stage::new("sweep-splits", &out).map_err(runtime)?;
    with_stage(stage, |stage| {
        stage.config_hash = blob_hash(cfg.snapshot()?.as_bytes());
        let ds = resolve_dataset(&cfg)?;
        stage.dataset_hash = dataset_hash(&ds)?;
        let gt = dataset_to_gt(&ds)?;

        let specs: Vec<(usize, usize)> = counts
            .iter()
            .flat_map(|&c| (0..args.seeds).map(move |s| (c, s)))
            .collect();
        for &(count, s) in &specs {
            stage.artifact(&run_name(count, s));
        }

        let rows = run_pool(&cfg, &ds, &gt, &specs, stage.out(), args.jobs)?;

        let per_count = aggregate(&counts, &rows);
        for agg in &per_count {
            println!(
                "strong {}: weak AP mean {:.4} (min {:.4}, max {:.4}) over {} seeds",
                agg.strong_count, agg.mean_weak_ap, agg.min_weak_ap, agg.max_weak_ap, args.seeds
            );
        }
        let doc = SweepDoc {
            config_hash: stage.config_hash.clone(),
            dataset_hash: stage.dataset_hash.clone(),
            rows,
            per_count,
        };
        write_json_atomic(&stage.artifact("sweep.json"), &doc)
    })
}

fn run_name(count: usize, seed_index: usize) -> String {
    format!("split{count}_seed{seed_index}")
}

/// Train and evaluate every (count, seed) pair on `jobs` worker threads.
/// Runs are isolated by directory; the first error aborts the remainder.
fn run_pool(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    gt: &[GtInstance],
    specs: &[(usize, usize)],
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; specs.len()]);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(specs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= specs.len() || stop.load(Ordering::SeqCst) {
                    break;
                }
                let (count, s) = specs[i];
                match sweep_run(cfg, ds, gt, count, s, &out.join(run_name(count, s))) {
                    Ok(row) => {
                        let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
                        eprintln!(
                            "[sweep] {}: weak AP {:.4} ({finished}/{} runs done)",
                            run_name(count, s),
                            row.weak_ap,
                            specs.len()
                        );
                        results.lock().unwrap()[i] = Some(row);
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        let mut slot = first_err.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(Error::Train(format!(
                                "sweep run {} failed: {e}",
                                run_name(count, s)
                            )));
                        }
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    let rows = results.into_inner().unwrap();
    Ok(rows.into_iter().map(|r| r.expect("no error, so every run finished")).collect())
}

/// One sweep run: train with the first `count` classes strong (seed offset
/// `s`), then detect and evaluate the subsets into `dir`.
fn sweep_run(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    gt: &[GtInstance],
    count: usize,
    s: usize,
    dir: &Path,
) -> Result<SweepRow> {
    let mut sub = cfg.clone();
    sub.seed = cfg.seed + s as u64;
    sub.train.seed = sub.seed;
    sub.train.strong_classes = (0..count).collect();

    let run = train_into(&sub, ds, dir, false)?;
    std::fs::write(dir.join("config.snapshot"), sub.snapshot()?)?;

    let split = run.trainer.split().clone();
    let model = run.trainer.checkpoint().into_model()?;
    let dets = detect_dataset(&model, ds, cfg.eval.batch_images)?;
    write_detections(&dir.join("detections.jsonl"), &dets)?;
    let summary = evaluate_subsets(gt, &dets, &split, &cfg.eval.thresholds);
    write_json_atomic(&dir.join("eval_all.json"), &summary.all)?;
    write_json_atomic(&dir.join("eval_strong.json"), &summary.strong)?;
    write_json_atomic(&dir.join("eval_weak.json"), &summary.weak)?;

    Ok(SweepRow {
        strong_count: count,
        seed_index: s,
        seed: sub.seed,
        all_ap: summary.all.ap,
        strong_ap: summary.strong.ap,
        weak_ap: summary.weak.ap,
        weak_ap50: summary.weak.ap50,
    })
}

fn aggregate(counts: &[usize], rows: &[SweepRow]) -> Vec<SweepAgg> {
    counts
        .iter()
        .map(|&c| {
            let aps: Vec<f64> =
                rows.iter().filter(|r| r.strong_count == c).map(|r| r.weak_ap).collect();
            SweepAgg {
                strong_count: c,
                mean_weak_ap: aps.iter().sum::<f64>() / aps.len() as f64,
                min_weak_ap: aps.iter().copied().fold(f64::INFINITY, f64::min),
                max_weak_ap: aps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}
