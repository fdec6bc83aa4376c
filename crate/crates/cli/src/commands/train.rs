//! `train`: train one model variant on the configured dataset, writing
//! metrics, checkpoints, and the resolved config snapshot into the run
//! directory.

use std::path::{Path, PathBuf};

use maskprior::error::Result;
use maskprior::model::{Model, Variant};
use maskprior::synth::Dataset;
use maskprior::train::{examples_from_dataset, LossBreakdown, Trainer};

use crate::commands::{resolve_dataset, runtime, usage, with_stage, CmdResult};
use crate::config::{load_config, ExperimentConfig, Overrides};
use crate::record::{dataset_hash, Stage};

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub split: Option<String>,
    pub data: Option<PathBuf>,
}

pub fn run(args: &TrainArgs) -> CmdResult {
    let variant = match &args.variant {
        Some(v) => Some(Variant::parse(v).map_err(usage)?),
        None => None,
    };
    let ovr = Overrides {
        seed: args.seed,
        variant,
        split: args.split.clone(),
        data: args.data.clone(),
    };
    let cfg = load_config(&args.config, &ovr).map_err(usage)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());

    let stage = Stage::new("train", &out).map_err(runtime)?;
    with_stage(stage, |stage| {
        super::gen::write_snapshot(&cfg, stage)?;
        let ds = resolve_dataset(&cfg)?;
        stage.dataset_hash = dataset_hash(&ds)?;
        let dir = stage.out().to_path_buf();
        stage.artifact("metrics.jsonl");
        let run = train_into(&cfg, &ds, &dir, true);
        // Register checkpoints even when training failed midway, so the
        // failure path quarantines them too.
        for name in checkpoint_names(&dir)? {
            stage.artifact(&name);
        }
        let run = run?;
        if let Some(last) = run.records.last() {
            println!(
                "trained {} for {} iterations: loss {:.4} (cls {:.4}, box {:.4}, mask {:.4})",
                cfg.train.variant, last.iter + 1, last.total, last.l_cls, last.l_box, last.l_mask
            );
        }
        println!("artifacts in {}", stage.out().display());
        Ok(())
    })
}

/// A finished training run inside one directory.
pub struct TrainedRun {
    pub trainer: Trainer<f32>,
    pub records: Vec<LossBreakdown>,
}

/// Train `cfg` on `ds` into `dir`, writing `metrics.jsonl` and
/// checkpoints. Stale metrics and checkpoints from a previous run are
/// removed first so re-runs produce identical bytes. The model is
/// initialized from the config's root seed.
pub fn train_into(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    dir: &Path,
    progress: bool,
) -> Result<TrainedRun> {
    std::fs::create_dir_all(dir)?;
    clean_training_outputs(dir)?;

    let examples = examples_from_dataset::<f32>(ds)?;
    let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), examples)?;
    let every = (cfg.train.total_iters / 20).max(1);
    let variant = cfg.train.variant;
    let total = cfg.train.total_iters;
    let records = trainer.train_with(Some(dir), |rec| {
        if progress && (rec.iter + 1) % every == 0 {
            eprintln!(
                "[{variant}] iter {}/{total} lr {:.5} loss {:.4}",
                rec.iter + 1,
                rec.lr,
                rec.total
            );
        }
    })?;
    Ok(TrainedRun { trainer, records })
}

fn clean_training_outputs(dir: &Path) -> Result<()> {
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    for name in checkpoint_names(dir)? {
        std::fs::remove_file(dir.join(name))?;
    }
    Ok(())
}

pub fn checkpoint_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("ckpt_") && name.ends_with(".bin") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}
