//! Per-invocation run records: content hashes of the config and dataset,
//! the artifact list, wall clock, and status — written atomically at the
//! end of every command. On failure, the artifacts the invocation produced
//! are quarantined under `failed/<command>/` before the record is written.

use std::path::{Path, PathBuf};
use std::time::Instant;

use maskprior::error::{Error, Result};
use maskprior::synth::Dataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// Content hash of the resolved config snapshot.
    pub config_hash: String,
    /// Content hash of the dataset manifest (annotations plus pixels).
    /// Empty when the command consumed no dataset.
    pub dataset_hash: String,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
    /// `"ok"` or `"failed: <reason>"`.
    pub status: String,
}

/// Content hash in the blob style (`blob <len>\0<bytes>`, SHA-256, hex).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash a dataset by hashing a manifest of its parts: the canonical
/// annotation JSON and each image's raw RGB bytes. Independent of whether
/// the dataset was loaded from disk or generated in memory.
pub fn dataset_hash(ds: &Dataset) -> Result<String> {
    let mut manifest = String::new();
    manifest.push_str(&format!("annotations {}\n", blob_hash(&serde_json::to_vec(&ds.json)?)));
    for (img, rgb) in ds.json.images.iter().zip(&ds.images_rgb) {
        manifest.push_str(&format!("{} {}\n", img.file, blob_hash(rgb)));
    }
    Ok(blob_hash(manifest.as_bytes()))
}

/// Write `value` as pretty JSON (plus trailing newline) via a temporary
/// file renamed into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One command invocation writing into a run directory. Tracks produced
/// artifacts so the final record lists them and failures can quarantine
/// them.
pub struct Stage {
    out: PathBuf,
    command: String,
    started: Instant,
    artifacts: Vec<String>,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl Stage {
    /// Create the run directory and start the clock. Clears any previous
    /// quarantine of this command so re-runs converge to the same state.
    pub fn new(command: &str, out: &Path) -> Result<Stage> {
        std::fs::create_dir_all(out)?;
        let quarantine = out.join("failed").join(command);
        if quarantine.exists() {
            std::fs::remove_dir_all(&quarantine)?;
        }
        Ok(Stage {
            out: out.to_path_buf(),
            command: command.to_owned(),
            started: Instant::now(),
            artifacts: Vec::new(),
            config_hash: String::new(),
            dataset_hash: String::new(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Register a relative artifact path and return its absolute location.
    pub fn artifact(&mut self, rel: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_owned());
        }
        self.out.join(rel)
    }

    fn record(&self, status: String) -> RunRecord {
        RunRecord {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            artifacts: self.artifacts.clone(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            status,
        }
    }

    fn record_path(&self) -> PathBuf {
        self.out.join(format!("record_{}.json", self.command.replace('-', "_")))
    }

    /// Success: write the record atomically.
    pub fn finish(self) -> Result<()> {
        write_json_atomic(&self.record_path(), &self.record("ok".into()))
    }

    /// Failure: move the artifacts produced by this invocation under
    /// `failed/<command>/`, then write the record pointing at the
    /// quarantined copies.
    pub fn fail(mut self, err: &Error) -> Result<()> {
        let quarantine = self.out.join("failed").join(&self.command);
        let mut moved = Vec::new();
        for rel in std::mem::take(&mut self.artifacts) {
            let src = self.out.join(&rel);
            if !src.exists() {
                continue;
            }
            let dst = quarantine.join(&rel);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::rename(&src, &dst)?;
            moved.push(format!("failed/{}/{rel}", self.command));
        }
        self.artifacts = moved;
        write_json_atomic(&self.record_path(), &self.record(format!("failed: {err}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskprior::synth::{generate_dataset, GenConfig};

    #[test]
    fn blob_hash_is_stable_and_length_sensitive() {
        let a = blob_hash(b"abc");
        assert_eq!(a, blob_hash(b"abc"), "deterministic");
        assert_ne!(a, blob_hash(b"abd"));
        assert_ne!(a, blob_hash(b"abc\0"), "length is part of the preimage");
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let cfg = GenConfig { num_images: 2, ..Default::default() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(dataset_hash(&a).unwrap(), dataset_hash(&b).unwrap());

        let c = generate_dataset(&GenConfig { seed: 99, ..cfg }).unwrap();
        assert_ne!(dataset_hash(&a).unwrap(), dataset_hash(&c).unwrap());

        let mut d = Dataset { json: a.json.clone(), images_rgb: a.images_rgb.clone() };
        d.images_rgb[0][0] ^= 1;
        assert_ne!(dataset_hash(&a).unwrap(), dataset_hash(&d).unwrap(), "pixels count");
    }

    #[test]
    fn failed_stages_quarantine_their_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut stage = Stage::new("train", dir.path()).unwrap();
        let metrics = stage.artifact("metrics.jsonl");
        std::fs::write(&metrics, "{}\n").unwrap();
        stage.artifact("never_written.json");
        stage.fail(&Error::Train("boom".into())).unwrap();

        assert!(!metrics.exists(), "moved out of the run dir");
        let moved = dir.path().join("failed/train/metrics.jsonl");
        assert!(moved.exists());
        let rec: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("record_train.json")).unwrap())
                .unwrap();
        assert!(rec.status.contains("boom"));
        assert_eq!(rec.artifacts, vec!["failed/train/metrics.jsonl"]);

        // A later successful run clears the quarantine.
        let stage = Stage::new("train", dir.path()).unwrap();
        assert!(!moved.exists());
        stage.finish().unwrap();
        let rec: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("record_train.json")).unwrap())
                .unwrap();
        assert_eq!(rec.status, "ok");
    }
}
