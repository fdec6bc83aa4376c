//! `gen-data`: generate the synthetic dataset and write it to disk.

use std::path::PathBuf;

use maskprior::error::Error;
use maskprior::synth::write_dataset;

use crate::commands::{resolve_dataset, runtime, usage, with_stage, CmdResult};
use crate::config::{load_config, ExperimentConfig, Overrides};
use crate::record::{blob_hash, dataset_hash, Stage};

pub struct GenArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn run(args: &GenArgs) -> CmdResult {
    let ovr = Overrides { seed: args.seed, ..Default::default() };
    let cfg = load_config(&args.config, &ovr).map_err(usage)?;
    if cfg.dataset.gen.is_none() {
        return Err(usage(
            "gen-data needs [dataset.gen] parameters, but the config names a prebuilt dataset path",
        ));
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());

    let stage = Stage::new("gen-data", &out).map_err(runtime)?;
    with_stage(stage, |stage| {
        write_snapshot(&cfg, stage)?;
        let ds = resolve_dataset(&cfg)?;
        stage.dataset_hash = dataset_hash(&ds)?;
        let dir = stage.out().to_path_buf();
        stage.artifact("annotations.json");
        stage.artifact("images");
        write_dataset(&ds, &dir)?;
        println!(
            "wrote {} images, {} annotations to {}",
            ds.json.images.len(),
            ds.json.annotations.len(),
            dir.display()
        );
        Ok(())
    })
}

/// Write the resolved config as `config.snapshot` and record its hash.
pub fn write_snapshot(cfg: &ExperimentConfig, stage: &mut Stage) -> Result<(), Error> {
    let snap = cfg.snapshot()?;
    stage.config_hash = blob_hash(snap.as_bytes());
    let path = stage.artifact("config.snapshot");
    std::fs::write(path, snap)?;
    Ok(())
}
