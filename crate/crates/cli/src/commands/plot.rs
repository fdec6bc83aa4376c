//! `plot`: render analysis JSON files to static SVG figures. Rendering is
//! a pure function of the parsed input, so the same JSON always yields
//! byte-identical figures.

use std::path::{Path, PathBuf};

use maskprior::error::{Error, Result};

use crate::commands::{runtime, with_stage, AmbiguityDoc, CmdResult, OverlapDoc, SweepDoc};
use crate::figures::{ambiguity_figure, overlap_figure, sweep_figure, SweepPoint};
use crate::record::Stage;

pub struct PlotArgs {
    pub out: PathBuf,
    pub overlap: Vec<PathBuf>,
    pub sweep: Option<PathBuf>,
    pub ambiguity: Vec<PathBuf>,
}

pub fn run(args: &PlotArgs) -> CmdResult {
    if args.overlap.is_empty() && args.sweep.is_none() && args.ambiguity.is_empty() {
        eprintln!("warning: no analyses supplied; nothing to plot");
        return Ok(());
    }

    let stage = Stage::new("plot", &args.out).map_err(runtime)?;
    with_stage(stage, |stage| {
        std::fs::create_dir_all(stage.out().join("figures"))?;
        let mut written = Vec::new();

        for path in &args.overlap {
            let doc: OverlapDoc = read_doc(path)?;
            let svg = overlap_figure(&doc.analysis, &title_for(path, "overlap vs mask AP"));
            written.push(emit(stage, &format!("figures/overlap_{}.svg", stem(path)), &svg)?);
        }
        if let Some(path) = &args.sweep {
            let doc: SweepDoc = read_doc(path)?;
            let points: Vec<SweepPoint> = doc
                .rows
                .iter()
                .map(|r| SweepPoint { count: r.strong_count, weak_ap: r.weak_ap })
                .collect();
            let svg = sweep_figure(&points, "weak-class mask AP vs strong-class count");
            written.push(emit(stage, "figures/sweep_splits.svg", &svg)?);
        }
        for path in &args.ambiguity {
            let doc: AmbiguityDoc = read_doc(path)?;
            let svg = ambiguity_figure(&doc.ambiguity, &title_for(path, "mask AP by ambiguity"));
            written.push(emit(stage, &format!("figures/ambiguity_{}.svg", stem(path)), &svg)?);
        }

        for name in &written {
            println!("wrote {}", stage.out().join(name).display());
        }
        Ok(())
    })
}

fn read_doc<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))
}

fn emit(stage: &mut Stage, rel: &str, svg: &str) -> Result<String> {
    std::fs::write(stage.artifact(rel), svg)?;
    Ok(rel.to_owned())
}

/// Figure file stem from the input path: parent directory plus file stem,
/// sanitized — distinguishes `runs/opmask/eval_overlap.json` from
/// `runs/baseline/eval_overlap.json`.
fn stem(path: &Path) -> String {
    let base = path.file_stem().and_then(|s| s.to_str()).unwrap_or("analysis");
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let raw = if parent.is_empty() { base.to_owned() } else { format!("{parent}_{base}") };
    raw.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn title_for(path: &Path, kind: &str) -> String {
    format!("{kind} — {}", stem(path))
}
