//! `analyze-ambiguity` and `analyze-overlap`: disk-to-disk analyses over
//! an annotation JSON and a detections JSONL, so they can re-run without
//! retraining or re-detecting.

use std::path::PathBuf;

use maskprior::error::Result;
use maskprior::eval::{dataset_to_gt, evaluate_by_ambiguity, EvalOptions};
use maskprior::pipeline::{analyze_overlap, read_detections};

use crate::commands::{
    load_annotations, parse_classes, runtime, usage, with_stage, AmbiguityDoc, CmdResult,
    InputSummary, OverlapDoc,
};
use crate::config::{load_config, EvalSection, Overrides};
use crate::record::{dataset_hash, write_json_atomic, Stage};

pub struct AnalyzeArgs {
    pub data: PathBuf,
    pub detections: PathBuf,
    pub out: PathBuf,
    pub classes: Option<String>,
    pub config: Option<PathBuf>,
    /// Ambiguity box-IoU threshold (`analyze-ambiguity` only).
    pub iou: Option<f64>,
}

/// Eval parameters come from the optional `--config`, falling back to the
/// defaults (COCO thresholds, ambiguity IoU 0.5).
fn eval_section(args: &AnalyzeArgs) -> Result<EvalSection> {
    Ok(match &args.config {
        Some(path) => load_config(path, &Overrides::default())?.eval,
        None => EvalSection::default(),
    })
}

fn load_inputs(
    args: &AnalyzeArgs,
    eval: &EvalSection,
    classes: &Option<Vec<usize>>,
    stage: &mut Stage,
) -> Result<(Vec<maskprior::eval::GtInstance>, Vec<maskprior::eval::Detection>, InputSummary)> {
    let ds = load_annotations(&args.data)?;
    stage.dataset_hash = dataset_hash(&ds)?;
    let gt = dataset_to_gt(&ds)?;
    let dets = read_detections(&args.detections)?;
    let inputs = InputSummary {
        annotations: args.data.display().to_string(),
        detections: args.detections.display().to_string(),
        num_gt: gt.len(),
        num_detections: dets.len(),
        classes: classes.clone(),
        thresholds: eval.thresholds.clone(),
    };
    Ok((gt, dets, inputs))
}

pub fn run_ambiguity(args: &AnalyzeArgs) -> CmdResult {
    let eval = eval_section(args).map_err(usage)?;
    let classes = match &args.classes {
        Some(text) => Some(parse_classes(text).map_err(usage)?),
        None => None,
    };
    let iou = args.iou.unwrap_or(eval.ambiguity_iou);
    if !(0.0 < iou && iou <= 1.0) {
        return Err(usage(format!("--iou must lie in (0, 1], got {iou}")));
    }

    let stage = Stage::new("analyze-ambiguity", &args.out).map_err(runtime)?;
    with_stage(stage, |stage| {
        let (gt, dets, inputs) = load_inputs(args, &eval, &classes, stage)?;
        let opts = EvalOptions { thresholds: eval.thresholds.clone(), classes: classes.clone() };
        let ambiguity = evaluate_by_ambiguity(&gt, &dets, &opts, iou);
        println!(
            "mask AP  ambiguous {:.4} (n={})  non-ambiguous {:.4} (n={})",
            ambiguity.ambiguous.ap,
            ambiguity.num_ambiguous,
            ambiguity.non_ambiguous.ap,
            ambiguity.num_non_ambiguous
        );
        write_json_atomic(&stage.artifact("eval_ambiguity.json"), &AmbiguityDoc { inputs, ambiguity })
    })
}

pub fn run_overlap(args: &AnalyzeArgs) -> CmdResult {
    let eval = eval_section(args).map_err(usage)?;
    let classes = match &args.classes {
        Some(text) => Some(parse_classes(text).map_err(usage)?),
        None => None,
    };

    let stage = Stage::new("analyze-overlap", &args.out).map_err(runtime)?;
    with_stage(stage, |stage| {
        let (gt, dets, mut inputs) = load_inputs(args, &eval, &classes, stage)?;
        let classes = classes.clone().unwrap_or_else(|| {
            let mut c: Vec<usize> = gt.iter().filter(|g| !g.ignore).map(|g| g.class).collect();
            c.sort_unstable();
            c.dedup();
            c
        });
        inputs.classes = Some(classes.clone());
        let analysis = analyze_overlap(&gt, &dets, &classes, &eval.thresholds)?;
        println!(
            "overlap vs AP over {} classes: slope {:.4}, p {:.4}, r {:.3}",
            analysis.classes.len(),
            analysis.fit.slope,
            analysis.fit.p_two_sided,
            analysis.fit.r
        );
        write_json_atomic(&stage.artifact("eval_overlap.json"), &OverlapDoc { inputs, analysis })
    })
}
