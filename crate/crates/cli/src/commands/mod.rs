//! Subcommand implementations. Each command resolves its inputs (usage
//! errors exit 1), opens a [`Stage`](crate::record::Stage) in its output
//! directory, and runs the body (runtime errors quarantine partial outputs
//! and exit 2).

pub mod analyze;
pub mod evalcmd;
pub mod experiments;
pub mod gen;
pub mod plot;
pub mod train;

use std::fmt;
use std::path::{Path, PathBuf};

use maskprior::error::{Error, Result};
use maskprior::synth::{generate_dataset, load_dataset, Dataset, DatasetJson};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::record::Stage;

/// Command outcome: usage problems exit 1, runtime failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

/// What every subcommand entry point returns.
pub type CmdResult = std::result::Result<(), CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

pub fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Run `body` inside an open stage: on success the record is written; on
/// failure the stage's artifacts are quarantined first and the error is
/// reported as a runtime failure.
pub fn with_stage<T>(
    mut stage: Stage,
    body: impl FnOnce(&mut Stage) -> Result<T>,
) -> std::result::Result<T, CliError> {
    match body(&mut stage) {
        Ok(v) => {
            stage.finish().map_err(runtime)?;
            Ok(v)
        }
        Err(e) => {
            let msg = e.to_string();
            stage.fail(&e).map_err(runtime)?;
            Err(CliError::Runtime(msg))
        }
    }
}

/// Materialize the config's dataset: load it from `dataset.path`, or
/// generate it from `dataset.gen`.
pub fn resolve_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.dataset.path, &cfg.dataset.gen) {
        (Some(path), None) => load_dataset(path),
        (None, Some(gen)) => generate_dataset(gen),
        _ => Err(Error::Config("dataset section needs exactly one of `path` or `gen`".into())),
    }
}

/// Load annotations for analysis commands: either a dataset directory
/// (its `annotations.json` is used) or a direct path to an annotation
/// JSON file. Pixels are not loaded — analyses only need geometry.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() { path.join("annotations.json") } else { path.to_path_buf() };
    let raw = std::fs::read_to_string(&file)
        .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
    let json: DatasetJson =
        serde_json::from_str(&raw).map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
    Ok(Dataset { json, images_rgb: Vec::new() })
}

/// The newest checkpoint in a run directory (highest iteration number).
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(run)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(iter) = name
            .strip_prefix("ckpt_")
            .and_then(|rest| rest.strip_suffix(".bin"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            if best.as_ref().map_or(true, |(b, _)| iter > *b) {
                best = Some((iter, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no ckpt_*.bin under {}", run.display())))
}

/// Parse a comma-separated list of class indices.
pub fn parse_classes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad class index {p:?} in list")))
        })
        .collect()
}

/// What an analysis was computed from — embedded in its JSON output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputSummary {
    pub annotations: String,
    pub detections: String,
    pub num_gt: usize,
    pub num_detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    pub thresholds: Vec<f64>,
}

/// `eval_overlap.json`: the Fig.-3-style per-class regression.
#[derive(Serialize, Deserialize)]
pub struct OverlapDoc {
    pub inputs: InputSummary,
    pub analysis: maskprior::pipeline::OverlapAnalysis,
}

/// `eval_ambiguity.json`: the Table-1-style subset comparison.
#[derive(Serialize, Deserialize)]
pub struct AmbiguityDoc {
    pub inputs: InputSummary,
    pub ambiguity: maskprior::eval::AmbiguityReport,
}

/// One sweep run's headline numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub strong_count: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub all_ap: f64,
    pub strong_ap: f64,
    pub weak_ap: f64,
    pub weak_ap50: f64,
}

/// Per-count aggregate over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepAgg {
    pub strong_count: usize,
    pub mean_weak_ap: f64,
    pub min_weak_ap: f64,
    pub max_weak_ap: f64,
}

/// `sweep.json`: all rows plus per-count aggregates.
#[derive(Serialize, Deserialize)]
pub struct SweepDoc {
    pub config_hash: String,
    pub dataset_hash: String,
    pub rows: Vec<SweepRow>,
    pub per_count: Vec<SweepAgg>,
}
