//! End-to-end tests for the `maskprior` binary: exit codes, artifact
//! layout, determinism of re-runs, and the failure paths that mark run
//! records and quarantine outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskprior"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn maskprior binary")
}

fn assert_exit(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    let raw = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&raw).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

/// A config small enough that a full train/eval cycle takes about a
/// second, while still producing real detections on both subsets.
const TINY_CONFIG: &str = r#"
seed = 5
out_dir = "run"

[dataset.gen]
num_images = 12
height = 64
width = 64
num_classes = 4
min_instances = 2
max_instances = 3
radius_range = [7.0, 11.0]
overlap_pressure = 0.7

[model]
num_classes = 4
stem_channels = 4
stage_channels = [6, 8, 10]
fpn_channels = 6
box_channels = 8
box_convs = 1
mask_channels = 6
mask_convs = 2
box_roi = 5
mask_roi = 10

[train]
total_iters = 200
warmup_iters = 20
batch_images = 2
strong_classes = [0, 1]
checkpoint_every = 200
base_lr = 0.005

[eval]
batch_images = 4
"#;

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).expect("write tiny config");
    path
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = TempDir::new().unwrap();
    for args in [
        &["--help"][..],
        &["--version"][..],
        &["train", "--help"][..],
        &["plot", "--help"][..],
    ] {
        let out = run_in(tmp.path(), args);
        assert_exit(&out, 0, &format!("{args:?}"));
    }
    let out = run_in(tmp.path(), &["--help"]);
    assert!(stdout(&out).contains("gen-data"), "help lists the subcommands");
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let cases: &[&[&str]] = &[
        &["no-such-command"],
        &["train"],                                   // missing --config
        &["train", "--config", "missing.toml"],       // unreadable config
        &["gen-data", "--config", "missing.toml", "--out", "d"],
        &["eval", "--run", "empty"],                  // no checkpoint to pick
    ];
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    for args in cases {
        let out = run_in(tmp.path(), args);
        assert_exit(&out, 1, &format!("{args:?}"));
    }

    // A config typo is caught before any work starts.
    let cfg = tmp.path().join("typo.toml");
    std::fs::write(&cfg, "seed = 1\n[train]\nbase_lrr = 0.1\n").unwrap();
    let out = run_in(tmp.path(), &["train", "--config", "typo.toml"]);
    assert_exit(&out, 1, "unknown config key");
    assert!(
        stderr(&out).contains("base_lrr"),
        "the offending key is named: {}",
        stderr(&out)
    );
}

#[test]
fn dump_defaults_prints_parseable_toml() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["--dump-defaults"]);
    assert_exit(&out, 0, "--dump-defaults");
    let table: toml::Table = stdout(&out).parse().expect("defaults parse as TOML");
    assert!(table.contains_key("model"), "defaults carry a [model] section");
    assert!(table.contains_key("train"), "defaults carry a [train] section");
    let gen = &table["dataset"]["gen"];
    assert_eq!(gen["num_classes"].as_integer(), Some(8));
}

#[test]
fn env_variables_override_config_keys() {
    let tmp = TempDir::new().unwrap();
    write_tiny_config(tmp.path());
    let out = bin()
        .current_dir(tmp.path())
        .env("MASKPRIOR_DATASET__GEN__NUM_IMAGES", "3")
        .args(["gen-data", "--config", "tiny.toml", "--out", "data"])
        .output()
        .unwrap();
    assert_exit(&out, 0, "gen-data with env override");
    let ann = read_json(&tmp.path().join("data/annotations.json"));
    assert_eq!(
        ann["images"].as_array().unwrap().len(),
        3,
        "MASKPRIOR_DATASET__GEN__NUM_IMAGES wins over the file"
    );
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    write_tiny_config(root);

    // --- gen-data ------------------------------------------------------
    let out = run_in(root, &["gen-data", "--config", "tiny.toml", "--out", "data"]);
    assert_exit(&out, 0, "gen-data");
    assert!(root.join("data/annotations.json").is_file());
    assert!(root.join("data/images/img_00001.png").is_file());
    let rec = read_json(&root.join("data/record_gen_data.json"));
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["dataset_hash"].as_str().unwrap().len(), 64);

    // Generation is deterministic: a second run reports the same hash.
    let out = run_in(root, &["gen-data", "--config", "tiny.toml", "--out", "data2"]);
    assert_exit(&out, 0, "second gen-data");
    let rec2 = read_json(&root.join("data2/record_gen_data.json"));
    assert_eq!(rec["dataset_hash"], rec2["dataset_hash"]);

    // --- train -----------------------------------------------------------
    let train_args = &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"];
    let out = run_in(root, train_args);
    assert_exit(&out, 0, "train");
    assert!(stdout(&out).contains("trained opmask for 200 iterations"));
    assert!(root.join("run/ckpt_200.bin").is_file());
    let rec = read_json(&root.join("run/record_train.json"));
    assert_eq!(rec["status"], "ok");
    let names: Vec<&str> = rec["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(names.contains(&"metrics.jsonl") && names.contains(&"ckpt_200.bin"));

    // --- eval ------------------------------------------------------------
    let out = run_in(root, &["eval", "--run", "run", "--data", "data"]);
    assert_exit(&out, 0, "eval");
    assert!(stdout(&out).contains("mask AP"));
    let report = read_json(&root.join("run/eval_all.json"));
    assert_eq!(report["num_gt"].as_u64(), Some(30));
    let n_det = report["num_detections"].as_u64().unwrap();
    assert!(n_det > 0, "a 200-iteration model should detect something");
    for name in ["eval_all.json", "eval_strong.json", "eval_weak.json"] {
        assert!(root.join("run").join(name).is_file(), "{name} written");
    }

    // --subset limits which reports appear.
    let out = run_in(
        root,
        &["eval", "--run", "run", "--data", "data", "--subset", "weak", "--out", "weak_only"],
    );
    assert_exit(&out, 0, "eval --subset weak");
    assert!(root.join("weak_only/eval_weak.json").is_file());
    assert!(!root.join("weak_only/eval_all.json").exists());

    // --- re-run determinism ---------------------------------------------
    let before = [
        std::fs::read(root.join("run/metrics.jsonl")).unwrap(),
        std::fs::read(root.join("run/detections.jsonl")).unwrap(),
        std::fs::read(root.join("run/eval_all.json")).unwrap(),
    ];
    assert_exit(&run_in(root, train_args), 0, "re-train");
    assert_exit(&run_in(root, &["eval", "--run", "run", "--data", "data"]), 0, "re-eval");
    let after = [
        std::fs::read(root.join("run/metrics.jsonl")).unwrap(),
        std::fs::read(root.join("run/detections.jsonl")).unwrap(),
        std::fs::read(root.join("run/eval_all.json")).unwrap(),
    ];
    assert_eq!(before, after, "re-running train + eval reproduces identical bytes");

    // --- analyses ----------------------------------------------------------
    let out = run_in(
        root,
        &["analyze-ambiguity", "--data", "data", "--detections", "run/detections.jsonl",
          "--out", "analysis"],
    );
    assert_exit(&out, 0, "analyze-ambiguity");
    let doc = read_json(&root.join("analysis/eval_ambiguity.json"));
    assert_eq!(doc["inputs"]["num_gt"].as_u64(), Some(30));
    assert!(doc["ambiguity"]["iou_thresh"].as_f64().unwrap() > 0.0);

    let out = run_in(
        root,
        &["analyze-overlap", "--data", "data", "--detections", "run/detections.jsonl",
          "--out", "analysis"],
    );
    assert_exit(&out, 0, "analyze-overlap");
    let doc = read_json(&root.join("analysis/eval_overlap.json"));
    assert_eq!(doc["analysis"]["classes"].as_array().unwrap().len(), 4);
    assert!(doc["analysis"]["fit"]["slope"].is_number());

    // --- plot -------------------------------------------------------------
    let plot_args = &["plot", "--out", "figs",
        "--overlap", "analysis/eval_overlap.json",
        "--ambiguity", "analysis/eval_ambiguity.json"];
    assert_exit(&run_in(root, plot_args), 0, "plot");
    let overlap_svg = root.join("figs/figures/overlap_analysis_eval_overlap.svg");
    let ambiguity_svg = root.join("figs/figures/ambiguity_analysis_eval_ambiguity.svg");
    assert!(overlap_svg.is_file() && ambiguity_svg.is_file());
    let first = std::fs::read(&overlap_svg).unwrap();
    assert_exit(&run_in(root, plot_args), 0, "re-plot");
    assert_eq!(first, std::fs::read(&overlap_svg).unwrap(), "SVG output is deterministic");
}

#[test]
fn variant_flag_rewrites_both_config_sections() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    write_tiny_config(root);
    assert_exit(
        &run_in(root, &["gen-data", "--config", "tiny.toml", "--out", "data"]),
        0,
        "gen-data",
    );
    let out = run_in(
        root,
        &["train", "--config", "tiny.toml", "--data", "data", "--out", "bl",
          "--variant", "baseline"],
    );
    assert_exit(&out, 0, "train --variant baseline");
    let snapshot = std::fs::read_to_string(root.join("bl/config.snapshot")).unwrap();
    assert_eq!(
        snapshot.matches("variant = \"baseline\"").count(),
        2,
        "model and train sections both carry the override:\n{snapshot}"
    );
}

#[test]
fn plot_with_no_inputs_warns_and_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = run_in(tmp.path(), &["plot", "--out", "figs"]);
    assert_exit(&out, 0, "plot without inputs");
    assert!(stderr(&out).contains("nothing to plot"));
    assert!(!tmp.path().join("figs").exists(), "no output directory is created");
}

#[test]
fn runtime_failures_exit_two_and_mark_the_record() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    write_tiny_config(root);
    assert_exit(
        &run_in(root, &["gen-data", "--config", "tiny.toml", "--out", "data"]),
        0,
        "gen-data",
    );

    // A detections file that is not JSONL fails mid-stage.
    std::fs::write(root.join("bad.jsonl"), "this is not json\n").unwrap();
    let out = run_in(
        root,
        &["analyze-ambiguity", "--data", "data", "--detections", "bad.jsonl",
          "--out", "analysis"],
    );
    assert_exit(&out, 2, "analyze-ambiguity on malformed detections");
    let rec = read_json(&root.join("analysis/record_analyze_ambiguity.json"));
    let status = rec["status"].as_str().unwrap();
    assert!(status.starts_with("failed"), "record carries the failure: {status}");

    // A later successful run of the same command replaces the failure.
    assert_exit(
        &run_in(root, &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"]),
        0,
        "train",
    );
    assert_exit(&run_in(root, &["eval", "--run", "run", "--data", "data"]), 0, "eval");
    let out = run_in(
        root,
        &["analyze-ambiguity", "--data", "data", "--detections", "run/detections.jsonl",
          "--out", "analysis"],
    );
    assert_exit(&out, 0, "analyze-ambiguity succeeds after the failure");
    let rec = read_json(&root.join("analysis/record_analyze_ambiguity.json"));
    assert_eq!(rec["status"], "ok");
}

#[test]
fn compare_priors_scores_all_three_variants() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    write_tiny_config(root);
    let out = run_in(root, &["compare-priors", "--config", "tiny.toml", "--out", "priors"]);
    assert_exit(&out, 0, "compare-priors");
    assert!(stdout(&out).contains("prior-as-mask AP50"));
    let doc = read_json(&root.join("priors/compare_priors.json"));
    let results = doc["results"].as_array().unwrap();
    let variants: Vec<&str> = results
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(variants, ["cls_only", "baseline", "opmask"]);
    for r in results {
        let ap50 = r["report"]["ap50"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ap50), "AP50 in range: {ap50}");
        assert!(root.join("priors").join(r["variant"].as_str().unwrap()).is_dir());
    }
}

#[test]
fn sweep_splits_runs_the_grid_and_aggregates() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    write_tiny_config(root);
    let out = run_in(
        root,
        &["sweep-splits", "--config", "tiny.toml", "--out", "sweep",
          "--counts", "1,2", "--seeds", "2", "--jobs", "2"],
    );
    assert_exit(&out, 0, "sweep-splits");
    let doc = read_json(&root.join("sweep/sweep.json"));
    assert_eq!(doc["rows"].as_array().unwrap().len(), 4, "2 counts x 2 seeds");
    assert_eq!(doc["per_count"].as_array().unwrap().len(), 2);
    for count in [1, 2] {
        for seed in [0, 1] {
            let dir = root.join(format!("sweep/split{count}_seed{seed}"));
            assert!(dir.join("eval_weak.json").is_file(), "{} complete", dir.display());
        }
    }

    // The sweep feeds the plot command.
    let out = run_in(root, &["plot", "--out", "figs", "--sweep", "sweep/sweep.json"]);
    assert_exit(&out, 0, "plot --sweep");
    assert!(root.join("figs/figures/sweep_splits.svg").is_file());
}
