//! `maskprior` — reproducible experiments for partially supervised
//! instance segmentation on synthetic shape scenes.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;
mod figures;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "maskprior",
    version,
    about = "Train and analyze mask-prior models on synthetic shape scenes",
    after_help = "Config keys can be overridden per invocation through \
                  MASKPRIOR_* environment variables (MASKPRIOR_TRAIN__BASE_LR=0.02)."
)]
struct Cli {
    /// Print the default experiment config as TOML and exit.
    #[arg(long, global = false)]
    dump_defaults: bool,

    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML; supports `include` and MASKPRIOR_* overrides).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset described by [dataset.gen] onto disk.
    GenData(CommonArgs),

    /// Train one model variant; writes metrics.jsonl and ckpt_*.bin.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Model variant: opmask | baseline | cls_only.
        #[arg(long)]
        variant: Option<String>,
        /// Strong (mask-supervised) classes, e.g. "0,1,2,3".
        #[arg(long)]
        split: Option<String>,
        /// Use a dataset directory instead of the config's dataset section.
        #[arg(long)]
        data: Option<PathBuf>,
    },

    /// Evaluate a trained run: mask AP on all / strong / weak classes.
    Eval {
        /// Run directory holding config.snapshot and ckpt_*.bin.
        #[arg(long)]
        run: PathBuf,
        /// Config to use instead of the run's config.snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to evaluate (default: newest in the run directory).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Use a dataset directory instead of the config's dataset section.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report only one subset: all | strong | weak.
        #[arg(long)]
        subset: Option<String>,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Mask AP on ambiguous vs non-ambiguous instances, from saved detections.
    AnalyzeAmbiguity {
        #[command(flatten)]
        inputs: AnalysisInputs,
        /// Box-IoU threshold that marks an instance ambiguous (default 0.5).
        #[arg(long)]
        iou: Option<f64>,
    },

    /// Regress per-class mask AP on per-class box overlap, from saved detections.
    AnalyzeOverlap {
        #[command(flatten)]
        inputs: AnalysisInputs,
    },

    /// Train cls_only, baseline, and opmask; score each prior as a mask.
    ComparePriors(CommonArgs),

    /// Re-train and evaluate across strong-class counts and seeds.
    SweepSplits {
        #[command(flatten)]
        common: CommonArgs,
        /// Strong-class counts to sweep.
        #[arg(long, default_value = "2,4,6,8")]
        counts: String,
        /// Seeds per count (seed i uses root seed + i).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Worker threads for dispatching runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },

    /// Render analysis JSON files to SVG figures under <out>/figures/.
    Plot {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// eval_overlap.json files (one scatter per file).
        #[arg(long = "overlap", num_args = 1..)]
        overlap: Vec<PathBuf>,
        /// sweep.json from sweep-splits.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// eval_ambiguity.json files (one bar chart per file).
        #[arg(long = "ambiguity", num_args = 1..)]
        ambiguity: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct AnalysisInputs {
    /// Dataset directory or annotations JSON file.
    #[arg(long)]
    data: PathBuf,
    /// Detections JSONL ({image_id, class_id, score, bbox, rle} per line).
    #[arg(long)]
    detections: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these classes, e.g. "4,5,6,7" (default: all with GT).
    #[arg(long)]
    classes: Option<String>,
    /// Optional config supplying eval thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData(c) => commands::gen::run(&commands::gen::GenArgs {
            config: c.config,
            out: c.out,
            seed: c.seed,
        }),
        Cmd::Train { common, variant, split, data } => {
            commands::train::run(&commands::train::TrainArgs {
                config: common.config,
                out: common.out,
                seed: common.seed,
                variant,
                split,
                data,
            })
        }
        Cmd::Eval { run, config, ckpt, data, subset, out } => {
            commands::evalcmd::run(&commands::evalcmd::EvalArgs {
                run,
                config,
                ckpt,
                data,
                subset,
                out,
            })
        }
        Cmd::AnalyzeAmbiguity { inputs, iou } => {
            commands::analyze::run_ambiguity(&analysis_args(inputs, iou))
        }
        Cmd::AnalyzeOverlap { inputs } => commands::analyze::run_overlap(&analysis_args(inputs, None)),
        Cmd::ComparePriors(c) => commands::experiments::run_priors(&commands::experiments::PriorsArgs {
            config: c.config,
            out: c.out,
            seed: c.seed,
        }),
        Cmd::SweepSplits { common, counts, seeds, jobs } => {
            commands::experiments::run_sweep(&commands::experiments::SweepArgs {
                config: common.config,
                out: common.out,
                seed: common.seed,
                counts,
                seeds,
                jobs,
            })
        }
        Cmd::Plot { out, overlap, sweep, ambiguity } => {
            commands::plot::run(&commands::plot::PlotArgs { out, overlap, sweep, ambiguity })
        }
    }
}

fn analysis_args(inputs: AnalysisInputs, iou: Option<f64>) -> commands::analyze::AnalyzeArgs {
    commands::analyze::AnalyzeArgs {
        data: inputs.data,
        detections: inputs.detections,
        out: inputs.out,
        classes: inputs.classes,
        config: inputs.config,
        iou,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // -h/--help/--version are successful exits; everything else is
            // a usage error.
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            print!("{e}");
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    if cli.dump_defaults {
        match config::ExperimentConfig::default().snapshot() {
            Ok(toml) => {
                print!("{toml}");
                return ExitCode::SUCCESS;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }

    let Some(cmd) = cli.cmd else {
        eprintln!("error: a subcommand is required (try --help)");
        return ExitCode::from(1);
    };

    match dispatch(cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
