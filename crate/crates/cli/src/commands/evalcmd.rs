//! `eval`: run mask inference from a trained checkpoint over the
//! configured dataset (ground-truth boxes as candidates) and report mask
//! AP on the full class set and the strong/weak subsets.

use std::path::{Path, PathBuf};

use maskprior::error::{Error, Result};
use maskprior::eval::{dataset_to_gt, EvalReport};
use maskprior::pipeline::{detect_dataset, evaluate_subsets, write_detections, SubsetSummary};
use maskprior::synth::{ClassSplit, Dataset};
use maskprior::train::Checkpoint;

use crate::commands::{
    latest_checkpoint, resolve_dataset, runtime, usage, with_stage, CmdResult,
};
use crate::config::{load_config, ExperimentConfig, Overrides};
use crate::record::{blob_hash, dataset_hash, write_json_atomic, Stage};

pub struct EvalArgs {
    pub run: PathBuf,
    pub config: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub subset: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn run(args: &EvalArgs) -> CmdResult {
    let config_path = args.config.clone().unwrap_or_else(|| args.run.join("config.snapshot"));
    let ovr = Overrides { data: args.data.clone(), ..Default::default() };
    let cfg = load_config(&config_path, &ovr).map_err(usage)?;
    let subset = match args.subset.clone().or_else(|| cfg.eval.subset.clone()) {
        Some(s) => {
            if !["all", "strong", "weak"].contains(&s.as_str()) {
                return Err(usage(format!("--subset must be all | strong | weak, got {s:?}")));
            }
            Some(s)
        }
        None => None,
    };
    let ckpt_path = match &args.ckpt {
        Some(p) => p.clone(),
        None => latest_checkpoint(&args.run).map_err(usage)?,
    };
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());

    let stage = Stage::new("eval", &out).map_err(runtime)?;
    with_stage(stage, |stage| {
        stage.config_hash = blob_hash(cfg.snapshot()?.as_bytes());
        let ds = resolve_dataset(&cfg)?;
        stage.dataset_hash = dataset_hash(&ds)?;
        let summary = evaluate_run(&cfg, &ckpt_path, &ds, stage, subset.as_deref())?;
        println!(
            "mask AP  all {:.4}  strong {:.4}  weak {:.4}  (AP50 weak {:.4})",
            summary.all.ap, summary.strong.ap, summary.weak.ap, summary.weak.ap50
        );
        Ok(())
    })
}

/// Detect with the checkpointed model, evaluate the subsets, and write
/// `detections.jsonl` plus the requested `eval_*.json` files.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    ckpt_path: &Path,
    ds: &Dataset,
    stage: &mut Stage,
    subset: Option<&str>,
) -> Result<SubsetSummary> {
    let ck = Checkpoint::<f32>::load(ckpt_path)?;
    if ck.iteration < ck.train_cfg.total_iters {
        eprintln!(
            "note: checkpoint is mid-schedule ({} of {} iterations)",
            ck.iteration, ck.train_cfg.total_iters
        );
    }
    let split = ClassSplit::new(ck.model_cfg.num_classes, &ck.train_cfg.strong_classes)?;
    if ck.model_cfg.num_classes != class_count(ds) {
        return Err(Error::Eval(format!(
            "checkpoint was trained for {} classes, dataset has {}",
            ck.model_cfg.num_classes,
            class_count(ds)
        )));
    }
    let model = ck.into_model()?;

    let dets = detect_dataset(&model, ds, cfg.eval.batch_images)?;
    write_detections(&stage.artifact("detections.jsonl"), &dets)?;

    let gt = dataset_to_gt(ds)?;
    let summary = evaluate_subsets(&gt, &dets, &split, &cfg.eval.thresholds);
    let mut emit = |name: &str, report: &EvalReport| -> Result<()> {
        write_json_atomic(&stage.artifact(&format!("eval_{name}.json")), report)
    };
    match subset {
        None => {
            emit("all", &summary.all)?;
            emit("strong", &summary.strong)?;
            emit("weak", &summary.weak)?;
        }
        Some("all") => emit("all", &summary.all)?,
        Some("strong") => emit("strong", &summary.strong)?,
        Some("weak") => emit("weak", &summary.weak)?,
        Some(other) => return Err(Error::Config(format!("unknown subset {other:?}"))),
    }
    Ok(summary)
}

fn class_count(ds: &Dataset) -> usize {
    ds.json.categories.len()
}
