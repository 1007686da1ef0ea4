use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forgetgate::analysis::{
    accuracy_vs_flexibility, distance_by_importance, flexibility_to_csv, histograms_to_csv, perturbation_study,
};
use forgetgate::checkpoint::Checkpoint;
use forgetgate::data::{load_mnist, mnist_dir_from_env, DATA_DIR_ENV};
use forgetgate::experiment::{
    boundary_snapshots, load_data, model_from_checkpoint, run_experiment, sweep, ExperimentConfig, Scale,
};
use forgetgate::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "forgetgate", version, about = "Continual-learning experiments with context-dependent gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence described by a config file.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run every point of the config's sweep grid and rank them.
    Sweep {
        /// Experiment config with a `sweep` section.
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Analyses of trained networks.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(Dataset),
}

#[derive(Args)]
struct RunFlags {
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Size preset (overrides the config).
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print per-task progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Analyze {
    /// Perturb output-layer synapses and correlate the accuracy change
    /// with importance.
    Perturb {
        /// The run's resolved `config.json`.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint written after the final task.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of synapses to perturb.
        #[arg(long, default_value_t = 1000)]
        synapses: usize,
        /// Size of the shift applied in each direction.
        #[arg(long, default_value_t = 10.0)]
        delta: f64,
        /// Seed for choosing synapses (defaults to the run's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter distance between two checkpoints, binned by the importance
    /// held in the earlier one (the importance protecting it).
    Distance {
        /// Checkpoint taken before the task of interest.
        #[arg(long)]
        before: PathBuf,
        /// Checkpoint taken after it.
        #[arg(long)]
        after: PathBuf,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance moved during each task against accuracy on that task.
    Flexibility {
        /// The run's resolved `config.json`.
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the per-task checkpoints of the run.
        #[arg(long)]
        dir: PathBuf,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Dataset {
    /// Check that the MNIST files are present and readable.
    FetchCheck {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(path: &Path, flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(s) = flags.scale {
        cfg.scale = match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        };
    }
    if let Some(o) = &flags.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Analysis summaries are printed only when the CSV went to a file.
fn summary_unless_stdout(out: &Option<PathBuf>, v: serde_json::Value) -> Result<serde_json::Value> {
    Ok(if out.is_some() { v } else { serde_json::Value::Null })
}

fn execute(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Run { config, flags, resume } => {
            let cfg = load_config(&config, &flags)?;
            let resume = resume.as_deref().map(Checkpoint::read).transpose()?;
            let out = run_experiment(&cfg, None, resume, flags.verbose)?;
            let mut summary = out.report().summary_json();
            summary["output_dir"] = json!(cfg.output_dir);
            Ok(summary)
        }
        Command::Sweep { config, flags } => {
            let cfg = load_config(&config, &flags)?;
            let data = match cfg.mnist() {
                Ok(m) => Some(load_data(&m.data, cfg.seed)?),
                Err(_) => None,
            };
            let report = sweep(&cfg, data.as_ref(), flags.verbose)?;
            Ok(json!({ "best": report.best(), "points": report.points.len(), "output_dir": cfg.output_dir }))
        }
        Command::Analyze(Analyze::Perturb {
            config,
            checkpoint,
            synapses,
            delta,
            seed,
            out,
        }) => {
            let cfg = ExperimentConfig::load(&config)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let model = model_from_checkpoint(&cfg, &ck)?;
            let setup = cfg.sequence_setup()?;
            if ck.next_task != setup.tasks.n_tasks() {
                return Err(Error::Config(format!(
                    "checkpoint covers {} of {} tasks",
                    ck.next_task,
                    setup.tasks.n_tasks()
                )));
            }
            let (_, test) = load_data(&cfg.mnist()?.data, cfg.seed)?;
            let study = perturbation_study(
                &model,
                &setup.tasks,
                &test,
                &ck.importance.omega,
                synapses,
                delta,
                seed.unwrap_or(cfg.seed),
            )?;
            emit(out.as_deref(), &study.to_csv())?;
            summary_unless_stdout(&out, json!({ "pearson_r": study.pearson_r, "base_mean_accuracy": study.base_mean_accuracy, "synapses": study.records.len() }))
        }
        Command::Analyze(Analyze::Distance { before, after, out }) => {
            let a = Checkpoint::read(&before)?;
            let b = Checkpoint::read(&after)?;
            let hists = distance_by_importance(&a.params, &b.params, &a.importance.omega)?;
            emit(out.as_deref(), &histograms_to_csv(&hists))?;
            let layers: Vec<_> = hists
                .iter()
                .map(|h| json!({ "layer": h.layer, "distance": h.distance, "weighted_distance": h.weighted_distance }))
                .collect();
            summary_unless_stdout(&out, json!({ "layers": layers }))
        }
        Command::Analyze(Analyze::Flexibility { config, dir, out }) => {
            let cfg = ExperimentConfig::load(&config)?;
            let (snaps, report) = boundary_snapshots(&cfg, &dir)?;
            let points = accuracy_vs_flexibility(&report, &snaps)?;
            emit(out.as_deref(), &flexibility_to_csv(&points))?;
            summary_unless_stdout(&out, json!({ "tasks": points.len() }))
        }
        Command::Dataset(Dataset::FetchCheck { dir }) => {
            let dir = dir.or_else(mnist_dir_from_env).ok_or_else(|| {
                Error::Config(format!(
                    "no dataset directory: pass --dir or set {DATA_DIR_ENV} to a directory holding \
                     train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte and \
                     t10k-labels-idx1-ubyte (optionally .gz)"
                ))
            })?;
            let (train, test) = load_mnist(&dir)?;
            Ok(json!({ "dir": dir, "train": train.len(), "test": test.len() }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(v) => {
            if !v.is_null() {
                println!("{v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
