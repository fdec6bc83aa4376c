//! Experiment configuration: a TOML file with include support and
//! environment-variable overrides, resolved into one fully-explicit
//! [`ExperimentConfig`] whose snapshot is written alongside every run.
//!
//! Resolution order (later wins):
//!
//! 1. files named by the top-level `include` key, in order, recursively
//! 2. the config file's own keys
//! 3. `MASKPRIOR_*` environment variables (`__` separates nesting levels,
//!    e.g. `MASKPRIOR_TRAIN__BASE_LR=0.02`)
//! 4. command-line flags (`--seed`, `--variant`, `--split`, `--data`)
//!
//! The root `seed` propagates to `dataset.gen.seed` and `train.seed` unless
//! the merged file pins those keys itself; model initialization always uses
//! the root seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use maskprior::error::{Error, Result};
use maskprior::eval::coco_thresholds;
use maskprior::model::{ModelConfig, Variant};
use maskprior::synth::GenConfig;
use maskprior::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "MASKPRIOR_";

/// Where the dataset comes from: a directory written by `gen-data`, or
/// generation parameters to build it in memory. Exactly one must be set.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Mask-IoU thresholds the AP is averaged over.
    pub thresholds: Vec<f64>,
    /// Images per inference batch.
    pub batch_images: usize,
    /// Box-IoU threshold above which an instance counts as ambiguous.
    pub ambiguity_iou: f64,
    /// Class subset the `eval` command reports: `all`, `strong`, or `weak`.
    /// Unset means all three reports are written. `--subset` overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: coco_thresholds(),
            batch_images: 8,
            ambiguity_iou: maskprior::eval::AMBIGUITY_IOU,
            subset: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; propagates to every stochastic component (dataset
    /// generation, model initialization, training) unless a section pins
    /// its own seed.
    pub seed: u64,
    /// Default output directory when a command is not given `--out`.
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            out_dir: PathBuf::from("runs/exp"),
            dataset: DatasetSection { path: None, gen: Some(GenConfig::default()) },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.dataset.path.is_some() && self.dataset.gen.is_some() {
            return fail("dataset section sets both `path` and `gen`; pick one");
        }
        if self.dataset.path.is_none() && self.dataset.gen.is_none() {
            return fail("dataset section needs `path` or `gen`");
        }
        if let Some(gen) = &self.dataset.gen {
            gen.validate()?;
            if gen.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "dataset.gen.num_classes ({}) != model.num_classes ({})",
                    gen.num_classes, self.model.num_classes
                )));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.model.variant != self.train.variant {
            return Err(Error::Config(format!(
                "model.variant ({}) != train.variant ({})",
                self.model.variant, self.train.variant
            )));
        }
        if self.eval.thresholds.is_empty() {
            return fail("eval.thresholds must not be empty");
        }
        if self.eval.thresholds.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return fail("eval.thresholds must lie strictly between 0 and 1");
        }
        if self.eval.batch_images == 0 {
            return fail("eval.batch_images must be positive");
        }
        if !(0.0 < self.eval.ambiguity_iou && self.eval.ambiguity_iou <= 1.0) {
            return fail("eval.ambiguity_iou must lie in (0, 1]");
        }
        if let Some(subset) = &self.eval.subset {
            if !["all", "strong", "weak"].contains(&subset.as_str()) {
                return Err(Error::Config(format!(
                    "eval.subset must be all | strong | weak, got {subset:?}"
                )));
            }
        }
        Ok(())
    }

    /// The resolved config as pretty TOML — the `config.snapshot` content.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}

/// Flag-level overrides applied after file + environment resolution.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    /// Strong-class list, e.g. `"0,1,2,3"`.
    pub split: Option<String>,
    /// Replaces the dataset section with a directory path.
    pub data: Option<PathBuf>,
}

/// Load, merge, override, propagate seeds, and validate.
pub fn load_config(path: &Path, ovr: &Overrides) -> Result<ExperimentConfig> {
    let mut table = load_merged(path, &mut BTreeSet::new())?;
    apply_env(&mut table, std::env::vars())?;

    // Presence checks must happen on the raw table, before typed parsing
    // fills defaults in.
    let pinned_train_seed = lookup(&table, &["train", "seed"]).is_some();
    let pinned_gen_seed = lookup(&table, &["dataset", "gen", "seed"]).is_some();
    let model_variant = lookup(&table, &["model", "variant"]).cloned();
    let train_variant = lookup(&table, &["train", "variant"]).cloned();

    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;

    // A variant named in only one section covers both.
    match (&model_variant, &train_variant) {
        (Some(v), None) => cfg.train.variant = variant_of(v)?,
        (None, Some(v)) => cfg.model.variant = variant_of(v)?,
        _ => {}
    }

    if let Some(seed) = ovr.seed {
        cfg.seed = seed;
    }
    if let Some(v) = ovr.variant {
        cfg.model.variant = v;
        cfg.train.variant = v;
    }
    if let Some(split) = &ovr.split {
        let parsed = maskprior::synth::ClassSplit::parse(cfg.model.num_classes, split)?;
        cfg.train.strong_classes = parsed.strong().to_vec();
    }
    if let Some(data) = &ovr.data {
        cfg.dataset = DatasetSection { path: Some(data.clone()), gen: None };
    }

    // Seed propagation.
    if !pinned_train_seed {
        cfg.train.seed = cfg.seed;
    }
    if let Some(gen) = &mut cfg.dataset.gen {
        if !pinned_gen_seed {
            gen.seed = cfg.seed;
        }
    }

    cfg.validate()?;
    Ok(cfg)
}

fn variant_of(v: &toml::Value) -> Result<Variant> {
    let s = v
        .as_str()
        .ok_or_else(|| Error::Config(format!("variant must be a string, got {v}")))?;
    Variant::parse(s)
}

fn lookup<'t>(table: &'t toml::Table, path: &[&str]) -> Option<&'t toml::Value> {
    let (head, rest) = path.split_first()?;
    let v = table.get(*head)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

/// Read one file, recursively merge its `include` list (earlier files are
/// weakest; the file's own keys win), and drop the `include` key.
fn load_merged(path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<toml::Table> {
    let canon = path
        .canonicalize()
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    if !seen.insert(canon.clone()) {
        return Err(Error::Config(format!("config include cycle at {}", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;

    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("include entries must be strings, got {other}"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::Config(format!(
                "include must be a string or array of strings, got {other}"
            )))
        }
    };

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        let sub = load_merged(&dir.join(&inc), seen)?;
        merge_tables(&mut merged, sub);
    }
    merge_tables(&mut merged, table);
    seen.remove(&canon);
    Ok(merged)
}

/// Deep-merge `over` onto `base`: tables merge recursively, everything else
/// replaces.
fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (slot, v) => {
                if let Some(slot) = slot {
                    *slot = v;
                } else {
                    base.insert(k, v);
                }
            }
        }
    }
}

/// Apply `MASKPRIOR_SECTION__KEY=value` overrides onto the merged table.
/// Values are parsed as TOML (so numbers, booleans, and arrays work) and
/// fall back to plain strings.
fn apply_env(
    table: &mut toml::Table,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    let mut overrides: Vec<(String, String)> =
        vars.filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort(); // deterministic application order
    for (key, raw) in overrides {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .to_ascii_lowercase()
            .split("__")
            .map(str::to_owned)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let value = parse_env_value(&raw);
        insert_at(table, &key, &path, value)?;
    }
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    // Try the raw text as a TOML value; quote it as a string otherwise.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn insert_at(table: &mut toml::Table, key: &str, path: &[String], value: toml::Value) -> Result<()> {
    let (head, rest) = path.split_first().expect("path is never empty");
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return Ok(());
    }
    let slot = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match slot {
        toml::Value::Table(t) => insert_at(t, key, rest, value),
        other => Err(Error::Config(format!(
            "override {key} descends into `{head}`, which holds {other}, not a section"
        ))),
    }
}
