//! Experiment configuration files, runs and hyperparameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use forgetgate_autodiff::ParameterSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::cogtask::{TaskId, ALL_TASKS, DESK_TASKS};
use crate::data::{
    load_mnist, make_split_label_tasks, mnist_dir_from_env, synthetic_dataset, HeadMode, LabeledDataset, Split,
    SyntheticSpec, TaskSequence, DATA_DIR_ENV,
};
use crate::error::{Error, Result};
use crate::gating::{split_layer_sizes, GateVariant, GatingScheme};
use crate::mlp::{EvalMode, Mlp, MlpConfig};
use crate::rnn::{train_sequence_rnn, LearningMethod, RlConfig, RnnConfig};
use crate::stabilization::StabilizerConfig;
use crate::trainer::{run_sequence, SequenceOptions, SequenceOutcome, SequenceSetup, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub scale: Scale,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExperimentKind {
    Mnist(MnistExperiment),
    Cognitive(CognitiveExperiment),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TaskSpec {
    Permuted {
        n_tasks: Option<usize>,
    },
    SplitLabel {
        n_tasks: usize,
        labels_per_task: usize,
        head_mode: HeadMode,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub input_dropout: Option<f64>,
    pub eval: Option<EvalMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingSpec {
    pub variant: GateVariant,
    #[serde(default)]
    pub context: bool,
}

impl Default for GatingSpec {
    fn default() -> Self {
        Self {
            variant: GateVariant::None,
            context: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    /// IDX files from the directory named by the environment variable.
    #[default]
    Mnist,
    MnistDir {
        dir: PathBuf,
    },
    Synthetic {
        n_per_class: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistExperiment {
    pub tasks: TaskSpec,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub gating: GatingSpec,
    #[serde(default)]
    pub stabilizer: StabilizerConfig,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CognitiveExperiment {
    pub tasks: Option<Vec<TaskId>>,
    pub method: LearningMethod,
    pub n_cells: Option<usize>,
    pub batches_per_task: Option<usize>,
    #[serde(default = "default_rnn_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_sup_lr")]
    pub lr: f64,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default)]
    pub rule_cue: bool,
    pub gating: GateVariant,
    #[serde(default)]
    pub stabilizer: StabilizerConfig,
}

fn default_rnn_batch() -> usize {
    64
}
fn default_eval_batches() -> usize {
    8
}
fn default_sup_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub c: Vec<f64>,
    #[serde(default)]
    pub zeta: Vec<f64>,
    #[serde(default)]
    pub input_dropout: Vec<bool>,
    #[serde(default = "yes")]
    pub refine: bool,
}

fn yes() -> bool {
    true
}

/// Penalty strengths searched for SI.
pub const SI_C_GRID: [f64; 11] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];
pub const SI_ZETA_GRID: [f64; 2] = [0.001, 0.01];
/// Penalty strengths searched for EWC.
pub const EWC_C_GRID: [f64; 12] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 100.0, 200.0, 500.0, 1000.0];

/// Input-dropout rate used when a sweep point enables it.
pub const SWEEP_INPUT_DROPOUT: f64 = 0.2;

impl ExperimentConfig {
    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("{file}: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{file}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the configuration with the output directory removed.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mnist(&self) -> Result<&MnistExperiment> {
        match &self.experiment {
            ExperimentKind::Mnist(m) => Ok(m),
            _ => Err(Error::Config("not an MNIST experiment".into())),
        }
    }

    /// Resolves presets and overrides into a trainer setup.
    pub fn sequence_setup(&self) -> Result<SequenceSetup> {
        let m = self.mnist()?;
        let tasks = match &m.tasks {
            TaskSpec::Permuted { n_tasks } => {
                let n = n_tasks.unwrap_or(match self.scale {
                    Scale::Desk => 10,
                    Scale::Paper => 100,
                });
                TaskSequence::permuted(n, self.seed)?
            }
            TaskSpec::SplitLabel {
                n_tasks,
                labels_per_task,
                head_mode,
            } => make_split_label_tasks(*n_tasks, *labels_per_task, 10, *head_mode)?,
        };
        let mut mlp = match self.scale {
            Scale::Desk => MlpConfig::desk(),
            Scale::Paper => MlpConfig::full_scale(),
        };
        let o = &m.model;
        if let Some(h) = &o.hidden {
            mlp.hidden = h.clone();
        }
        if let GateVariant::Split { n_subnets } = m.gating.variant {
            let w = split_layer_sizes(mlp.input_dim, &mlp.hidden, n_subnets)?;
            mlp.hidden = vec![w * n_subnets; mlp.hidden.len()];
        }
        mlp.epochs = o.epochs.unwrap_or(mlp.epochs);
        mlp.batch_size = o.batch_size.unwrap_or(mlp.batch_size);
        mlp.lr = o.lr.unwrap_or(mlp.lr);
        mlp.dropout = o.dropout.unwrap_or(mlp.dropout);
        mlp.input_dropout = o.input_dropout.unwrap_or(mlp.input_dropout);
        if let Some(e) = &o.eval {
            mlp.eval = e.clone();
        }
        mlp.n_outputs = tasks.n_outputs();
        mlp.validate()?;
        let gating = GatingScheme::new(
            m.gating.variant,
            m.gating.context,
            tasks.n_tasks(),
            mlp.hidden.clone(),
            self.seed,
        )?;
        m.stabilizer.validate()?;
        Ok(SequenceSetup {
            mlp,
            gating,
            tasks,
            stabilizer: m.stabilizer.clone(),
            seed: self.seed,
        })
    }

    pub fn rnn_config(&self) -> Result<RnnConfig> {
        let c = match &self.experiment {
            ExperimentKind::Cognitive(c) => c,
            _ => return Err(Error::Config("not a cognitive-task experiment".into())),
        };
        let (tasks, cells, batches) = match self.scale {
            Scale::Desk => (DESK_TASKS.to_vec(), 128, 1000),
            Scale::Paper => (ALL_TASKS.to_vec(), 256, 6000),
        };
        let cfg = RnnConfig {
            tasks: c.tasks.clone().unwrap_or(tasks),
            method: c.method,
            n_cells: c.n_cells.unwrap_or(cells),
            batch_size: c.batch_size,
            batches_per_task: c.batches_per_task.unwrap_or(batches),
            eval_batches: c.eval_batches,
            lr: c.lr,
            rl: c.rl.clone(),
            rule_cue: c.rule_cue,
            gating: c.gating,
            stabilizer: c.stabilizer.clone(),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads the train and test splits an MNIST experiment asks for.
pub fn load_data(source: &DataSource, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    match source {
        DataSource::Mnist => {
            let dir = mnist_dir_from_env()
                .ok_or_else(|| Error::Config(format!("set {DATA_DIR_ENV} to the directory holding the MNIST IDX files")))?;
            load_mnist(&dir)
        }
        DataSource::MnistDir { dir } => load_mnist(dir),
        DataSource::Synthetic { n_per_class, noise } => {
            let spec = SyntheticSpec {
                n_per_class: *n_per_class,
                noise: *noise,
                seed,
                ..SyntheticSpec::default()
            };
            Ok((synthetic_dataset(&spec, Split::Train)?, synthetic_dataset(&spec, Split::Test)?))
        }
    }
}

/// The model a configuration starts from, before any training.
pub fn initial_model(cfg: &ExperimentConfig) -> Result<Mlp> {
    let s = cfg.sequence_setup()?;
    Mlp::new(s.mlp, s.gating, s.seed)
}

/// Rebuilds the trained model stored in a checkpoint, checking that it
/// belongs to this configuration.
pub fn model_from_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Mlp> {
    let mut model = initial_model(cfg)?;
    ck.check_compatible(&model.params, cfg.seed, &cfg.fingerprint())?;
    model.params = ck.params.clone();
    Ok(model)
}

/// Parameter states at every task boundary of a checkpointed run: the
/// initialization followed by one checkpoint per finished task, plus the
/// report of the last one.
pub fn boundary_snapshots(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<ParameterSet>, TrainReport)> {
    let init = initial_model(cfg)?;
    let n = cfg.sequence_setup()?.tasks.n_tasks();
    let mut snaps = vec![init.params.clone()];
    let mut report = None;
    for k in 0..n {
        let p = checkpoint_path(dir, k);
        if !p.exists() {
            if k == 0 {
                return Err(Error::Config(format!("no checkpoints in {}", dir.display())));
            }
            break;
        }
        let ck = Checkpoint::read(&p)?;
        ck.check_compatible(&init.params, cfg.seed, &cfg.fingerprint())?;
        snaps.push(ck.params);
        report = Some(ck.report);
    }
    let report = report.expect("at least one checkpoint");
    if report.accuracy.len() != snaps.len() - 1 {
        return Err(Error::Config(format!(
            "checkpoints in {} are incomplete: report covers {} tasks, found {} checkpoints",
            dir.display(),
            report.accuracy.len(),
            snaps.len() - 1
        )));
    }
    Ok((snaps, report))
}

/// Artifacts of one run.
pub enum RunOutput {
    Mnist(Box<SequenceOutcome>),
    Cognitive(TrainReport),
}

impl RunOutput {
    pub fn report(&self) -> &TrainReport {
        match self {
            RunOutput::Mnist(o) => &o.report,
            RunOutput::Cognitive(r) => r,
        }
    }
}

fn append_log(dir: Option<&Path>, line: &str) {
    if let Some(d) = dir {
        use std::io::Write;
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(d.join("run.log")) {
            let _ = writeln!(f, "{line}");
        }
    }
}

/// Runs an experiment, writing `config.json`, `accuracy.csv`,
/// `summary.json`, `run.log` and (if enabled) checkpoints to the output
/// directory. A training failure is recorded in the summary, keeping the
/// rows finished so far.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: Option<&(LabeledDataset, LabeledDataset)>,
    resume: Option<Checkpoint>,
    verbose: bool,
) -> Result<RunOutput> {
    let out = cfg.output_dir.clone();
    if let Some(d) = &out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("config.json");
        fs::write(&p, cfg.to_json()?).map_err(|e| Error::io(&p, e))?;
    }
    let fingerprint = cfg.fingerprint();
    append_log(out.as_deref(), &format!("start {} fingerprint {fingerprint}", cfg.name));
    let result = (|| match &cfg.experiment {
        ExperimentKind::Mnist(m) => {
            let setup = cfg.sequence_setup()?;
            let loaded;
            let (train, test) = match data {
                Some(d) => (&d.0, &d.1),
                None => {
                    loaded = load_data(&m.data, cfg.seed)?;
                    (&loaded.0, &loaded.1)
                }
            };
            let options = SequenceOptions {
                out_dir: out.clone(),
                checkpoints: m.checkpoints,
                keep_snapshots: false,
                fingerprint: fingerprint.clone(),
                resume,
                verbose,
            };
            run_sequence(&setup, train, test, options).map(|o| RunOutput::Mnist(Box::new(o)))
        }
        ExperimentKind::Cognitive(_) => {
            if resume.is_some() {
                return Err(Error::Config("resuming is only supported for MNIST experiments".into()));
            }
            let rc = cfg.rnn_config()?;
            train_sequence_rnn(&rc, verbose).map(|o| {
                let mut r = o.report;
                r.fingerprint = fingerprint.clone();
                RunOutput::Cognitive(r)
            })
        }
    })();
    match &result {
        Ok(r) => {
            if let Some(d) = &out {
                r.report().write(d)?;
            }
            append_log(
                out.as_deref(),
                &format!("done mean final accuracy {}", r.report().mean_final_accuracy()),
            );
        }
        Err(e) => {
            if let Some(d) = &out {
                let p = d.join("summary.json");
                let mut summary = fs::read_to_string(&p)
                    .ok()
                    .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
                    .unwrap_or_else(|| serde_json::json!({ "fingerprint": fingerprint }));
                summary["error"] = serde_json::Value::String(e.to_string());
                fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
            }
            append_log(out.as_deref(), &format!("failed: {e}"));
        }
    }
    result
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub zeta: Option<f64>,
    pub input_dropout: bool,
    pub refinement: bool,
    pub mean_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Grid points in a fixed order: ζ, then input dropout, then c.
pub fn sweep_points(grid: &SweepGrid) -> Vec<SweepPoint> {
    let zetas: Vec<Option<f64>> = if grid.zeta.is_empty() {
        vec![None]
    } else {
        grid.zeta.iter().copied().map(Some).collect()
    };
    let drops = if grid.input_dropout.is_empty() {
        vec![false]
    } else {
        grid.input_dropout.clone()
    };
    let mut out = Vec::new();
    for &zeta in &zetas {
        for &input_dropout in &drops {
            for &c in &grid.c {
                out.push(SweepPoint {
                    c,
                    zeta,
                    input_dropout,
                    refinement: false,
                    mean_accuracy: None,
                    error: None,
                });
            }
        }
    }
    out
}

/// Ranks by mean accuracy (descending), ties to the smaller c; failed
/// points go last.
pub fn rank_points(points: &mut [SweepPoint]) {
    points.sort_by(|a, b| match (a.mean_accuracy, b.mean_accuracy) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.c.total_cmp(&b.c)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.c.total_cmp(&b.c),
    });
}

/// Midpoint between the best c and the better of its neighbours in the
/// grid, among points sharing the best point's ζ and input dropout.
pub fn refinement_candidate(points: &[SweepPoint]) -> Option<SweepPoint> {
    let mut ranked: Vec<SweepPoint> = points.to_vec();
    rank_points(&mut ranked);
    let best = ranked.first().filter(|p| p.mean_accuracy.is_some())?.clone();
    let mut same: Vec<&SweepPoint> = points
        .iter()
        .filter(|p| p.zeta == best.zeta && p.input_dropout == best.input_dropout && !p.refinement)
        .collect();
    same.sort_by(|a, b| a.c.total_cmp(&b.c));
    let i = same.iter().position(|p| p.c == best.c)?;
    let acc = |p: &SweepPoint| p.mean_accuracy.unwrap_or(f64::NEG_INFINITY);
    let left = i.checked_sub(1).map(|j| same[j]);
    let right = same.get(i + 1).copied();
    let other = match (left, right) {
        (Some(l), Some(r)) => {
            if acc(r) > acc(l) {
                r
            } else {
                l
            }
        }
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => return None,
    };
    Some(SweepPoint {
        c: (best.c + other.c) / 2.0,
        refinement: true,
        mean_accuracy: None,
        error: None,
        ..best
    })
}

impl SweepPoint {
    /// The base configuration with this point's hyperparameters.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.sweep = None;
        match &mut cfg.experiment {
            ExperimentKind::Mnist(m) => {
                m.stabilizer.c = self.c;
                if let Some(z) = self.zeta {
                    m.stabilizer.zeta = z;
                }
                m.model.input_dropout = Some(if self.input_dropout { SWEEP_INPUT_DROPOUT } else { 0.0 });
            }
            ExperimentKind::Cognitive(c) => {
                c.stabilizer.c = self.c;
                if let Some(z) = self.zeta {
                    c.stabilizer.zeta = z;
                }
            }
        }
        if let Some(d) = &base.output_dir {
            cfg.output_dir = Some(d.join(self.tag()));
        }
        Ok(cfg)
    }

    pub fn tag(&self) -> String {
        format!(
            "c{}_z{}_d{}{}",
            self.c,
            self.zeta.map_or("-".into(), |z| z.to_string()),
            u8::from(self.input_dropout),
            if self.refinement { "_mid" } else { "" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Ranked, best first.
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn best(&self) -> Option<&SweepPoint> {
        self.points.first().filter(|p| p.mean_accuracy.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,c,zeta,input_dropout,refinement,mean_accuracy,error\n");
        for (i, p) in self.points.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                p.c,
                p.zeta.map_or(String::new(), |z| z.to_string()),
                p.input_dropout,
                p.refinement,
                p.mean_accuracy.map_or(String::new(), |a| a.to_string()),
                p.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }
}

/// Runs every grid point, then the midpoint refinement, and ranks them.
/// Failed points are recorded and do not stop the sweep. `evaluate` runs
/// one configuration and returns its mean final accuracy.
pub fn sweep_with<F>(base: &ExperimentConfig, mut evaluate: F) -> Result<SweepReport>
where
    F: FnMut(&ExperimentConfig) -> Result<f64>,
{
    let grid = base
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    if grid.c.is_empty() {
        return Err(Error::Config("sweep.c must list at least one value".into()));
    }
    let mut points = sweep_points(grid);
    let mut run = |p: &mut SweepPoint| match p.apply(base).and_then(|c| evaluate(&c)) {
        Ok(a) => p.mean_accuracy = Some(a),
        Err(e) => p.error = Some(e.to_string()),
    };
    for p in &mut points {
        run(p);
    }
    if grid.refine {
        if let Some(mut mid) = refinement_candidate(&points) {
            if !points.iter().any(|p| p.c == mid.c && p.zeta == mid.zeta && p.input_dropout == mid.input_dropout) {
                run(&mut mid);
                points.push(mid);
            }
        }
    }
    rank_points(&mut points);
    let report = SweepReport { points };
    if let Some(d) = &base.output_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("sweep.csv");
        fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
        let p = d.join("sweep.json");
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

/// `sweep_with` using full experiment runs.
pub fn sweep(base: &ExperimentConfig, data: Option<&(LabeledDataset, LabeledDataset)>, verbose: bool) -> Result<SweepReport> {
    sweep_with(base, |cfg| Ok(run_experiment(cfg, data, None, verbose)?.report().mean_final_accuracy()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"seed": 3, "experiment": {"kind": "mnist", "tasks": {"kind": "permuted", "n_tasks": 2},
                "stabilizer": {"method": "si", "c": 0.1}},
                "sweep": {"c": [0.01, 0.1, 1.0]}}"#,
            "t.json",
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let cfg = base();
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap(), "x").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "sede": 2, "experiment": {}}"#, "bad.json").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"seed": 1, "experiment": {"kind": "mnist", "tasks": {"kind": "permuted"}, "epoch": 3}}"#,
            "bad.json",
        )
        .unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn desk_setup_defaults() {
        let s = base().sequence_setup().unwrap();
        assert_eq!(s.mlp.hidden, vec![400, 400]);
        assert_eq!(s.tasks.n_tasks(), 2);
        assert_eq!(s.mlp.epochs, 20);
    }

    #[test]
    fn split_setup_widths() {
        let mut cfg = base();
        cfg.scale = Scale::Paper;
        if let ExperimentKind::Mnist(m) = &mut cfg.experiment {
            m.gating = GatingSpec {
                variant: GateVariant::Split { n_subnets: 5 },
                context: true,
            };
        }
        let s = cfg.sequence_setup().unwrap();
        assert_eq!(s.mlp.hidden, vec![5 * 733, 5 * 733]);
    }

    #[test]
    fn sweep_ranks_ties_and_refines() {
        let report = sweep_with(&base(), |cfg| {
            let c = cfg.mnist().unwrap().stabilizer.c;
            Ok(if c == 1.0 { 0.5 } else { 0.9 })
        })
        .unwrap();
        let cs: Vec<f64> = report.points.iter().map(|p| p.c).collect();
        // 0.01 and 0.1 tie; the smaller wins. Refinement sits between
        // 0.01 and its only neighbour 0.1.
        assert_eq!(cs, vec![0.01, 0.055, 0.1, 1.0]);
        assert!(report.points[1].refinement);
    }

    #[test]
    fn two_point_grid_refines_to_midpoint() {
        let grid = SweepGrid {
            c: vec![0.2, 0.5],
            zeta: vec![],
            input_dropout: vec![],
            refine: true,
        };
        let mut pts = sweep_points(&grid);
        pts[0].mean_accuracy = Some(0.8);
        pts[1].mean_accuracy = Some(0.9);
        assert_eq!(refinement_candidate(&pts).unwrap().c, 0.35);
    }

    #[test]
    fn failed_points_do_not_abort() {
        let report = sweep_with(&base(), |cfg| {
            let c = cfg.mnist().unwrap().stabilizer.c;
            if c == 0.1 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(c)
            }
        })
        .unwrap();
        let last = report.points.last().unwrap();
        assert_eq!(last.c, 0.1);
        assert!(last.error.as_deref().unwrap().contains("boom"));
        assert_eq!(report.best().unwrap().c, 1.0);
    }
}
