//! Sequential-task training and evaluation of the feed-forward model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use forgetgate_autodiff::{stream, AdamState, Graph, ParameterSet, Rng};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::data::{LabeledDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::gating::GatingScheme;
use crate::mlp::{masked_argmax, EvalMode, Mlp, MlpConfig, Mode, TaskView};
use crate::stabilization::{ewc_fisher, ImportanceStore, SiAccumulator, StabilizerConfig, StabilizerMethod};

const TRAIN_TAG: u64 = 0x7472_6169;
const EVAL_TAG: u64 = 0x6576_616c;
const FISHER_TAG: u64 = 0x6669_7368;
const EVAL_CHUNK: usize = 1000;

/// Per-epoch mean losses for one task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub task_loss: Vec<f64>,
    pub penalty: Vec<f64>,
}

/// Everything `run_sequence` needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSetup {
    pub mlp: MlpConfig,
    pub gating: GatingScheme,
    pub tasks: TaskSequence,
    pub stabilizer: StabilizerConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SequenceOptions {
    /// Directory for the CSV/JSON report (rewritten after every task) and
    /// checkpoints.
    pub out_dir: Option<PathBuf>,
    pub checkpoints: bool,
    /// Keep a copy of the parameters at every task boundary, starting with
    /// the initialization.
    pub keep_snapshots: bool,
    pub fingerprint: String,
    pub resume: Option<Checkpoint>,
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `accuracy[i][j]`: accuracy on task j after training task i (j ≤ i).
    pub accuracy: Vec<Vec<f64>>,
    pub task_seconds: Vec<f64>,
    pub losses: Vec<LossTrace>,
    pub fingerprint: String,
}

impl TrainReport {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            accuracy: Vec::new(),
            task_seconds: Vec::new(),
            losses: Vec::new(),
            fingerprint: fingerprint.into(),
        }
    }

    /// Mean accuracy over all tasks after the last task.
    pub fn mean_final_accuracy(&self) -> f64 {
        self.accuracy.last().map_or(0.0, |r| mean(r))
    }

    /// Mean accuracy over the tasks seen so far, after each task.
    pub fn mean_accuracy_curve(&self) -> Vec<f64> {
        self.accuracy.iter().map(|r| mean(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task,eval_task,accuracy\n");
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                s.push_str(&format!("{i},{j},{a}\n"));
            }
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "fingerprint": self.fingerprint,
            "tasks_completed": self.accuracy.len(),
            "mean_final_accuracy": self.mean_final_accuracy(),
            "mean_accuracy_curve": self.mean_accuracy_curve(),
            "final_accuracies": self.accuracy.last().cloned().unwrap_or_default(),
            "task_seconds": self.task_seconds,
            "losses": self.losses,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("accuracy.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        fs::write(&json, serde_json::to_string_pretty(&self.summary_json())?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains `model` on one task with Adam, adding the stabilization penalty
/// from `store` and feeding SI's path integral when `si` is given.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut Mlp,
    tasks: &TaskSequence,
    train: &LabeledDataset,
    task: usize,
    stabilizer: &StabilizerConfig,
    store: &ImportanceStore,
    adam: &mut AdamState,
    mut si: Option<&mut SiAccumulator>,
    seed: u64,
) -> Result<LossTrace> {
    let mut rng = stream(seed, &[TRAIN_TAG, task as u64]);
    let mut order = tasks.task_indices(train, task);
    if order.is_empty() {
        return Err(Error::invalid("train_task", format!("task {task} has no training items")));
    }
    let class_mask = tasks.class_mask(task);
    let penalize = stabilizer.method != StabilizerMethod::None && stabilizer.c != 0.0;
    let mut trace = LossTrace::default();
    for epoch in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut pen_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(model.config.batch_size) {
            let batch = tasks.batch(train, task, chunk)?;
            let mut g = Graph::new();
            let vars = model.params.register(&mut g);
            let logits = model.forward(&mut g, &vars, &batch.inputs, task, Mode::Train, Some(&mut rng))?;
            let loss = g.cross_entropy(logits, batch.targets, None, class_mask.clone())?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    task,
                    message: format!("non-finite loss at epoch {epoch}"),
                });
            }
            let mut grads_map = g.backward(loss)?;
            let task_grads: Vec<_> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, p)| grads_map.take_or_zeros(v, p.shape()))
                .collect();
            drop(g);
            let mut total = task_grads.clone();
            if penalize {
                pen_sum += store.penalty(&model.params, stabilizer.c)?;
                store.add_penalty_grad(&model.params, stabilizer.c, &mut total)?;
            }
            match si.as_deref_mut() {
                Some(acc) => {
                    let before = model.params.clone();
                    adam.step(&mut model.params, &total)?;
                    acc.si_batch_update(&before, &model.params, &task_grads)?;
                }
                None => adam.step(&mut model.params, &total)?,
            }
            loss_sum += loss_value;
            steps += 1;
        }
        trace.task_loss.push(loss_sum / steps as f64);
        trace.penalty.push(pen_sum / steps as f64);
    }
    if model.params.tensors().iter().any(|t| !t.all_finite()) {
        return Err(Error::Diverged {
            task,
            message: "non-finite parameters".into(),
        });
    }
    Ok(trace)
}

/// Argmax accuracy on `task`'s test items (dropout off, task's gate and
/// context applied).
pub fn evaluate(model: &Mlp, tasks: &TaskSequence, test: &LabeledDataset, task: usize, seed: u64) -> Result<f64> {
    let pool = tasks.task_indices(test, task);
    if pool.is_empty() {
        return Err(Error::invalid("evaluate", format!("task {task} has no test items")));
    }
    let items: Vec<usize> = match model.config.eval {
        EvalMode::FullTest => pool,
        EvalMode::Batches { n_batches, batch_size } => {
            let mut rng: Rng = stream(seed, &[EVAL_TAG, task as u64]);
            let mut items = Vec::with_capacity(n_batches * batch_size);
            for _ in 0..n_batches {
                items.extend(pool.choose_multiple(&mut rng, batch_size.min(pool.len())).copied());
            }
            items
        }
    };
    let class_mask = tasks.class_mask(task);
    let mut correct = 0usize;
    for chunk in items.chunks(EVAL_CHUNK) {
        let batch = tasks.batch(test, task, chunk)?;
        let logits = model.logits(&batch.inputs, task)?;
        for (r, &c) in batch.classes.iter().enumerate() {
            if masked_argmax(logits.row(r), class_mask.as_deref()) == c {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Result of a sequential run.
#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub report: TrainReport,
    pub model: Mlp,
    pub importance: ImportanceStore,
    /// Per-task Ω^k in task order.
    pub task_importance: Vec<Vec<forgetgate_autodiff::Tensor>>,
    pub snapshots: Vec<ParameterSet>,
}

/// Trains the tasks of `setup` in order, evaluating every task seen so far
/// after each one.
pub fn run_sequence(
    setup: &SequenceSetup,
    train: &LabeledDataset,
    test: &LabeledDataset,
    options: SequenceOptions,
) -> Result<SequenceOutcome> {
    setup.stabilizer.validate()?;
    let n_tasks = setup.tasks.n_tasks();
    if n_tasks == 0 {
        return Err(Error::invalid("sequence", "no tasks"));
    }
    if setup.gating.n_tasks < n_tasks {
        return Err(Error::invalid(
            "gating",
            format!("scheme covers {} tasks, sequence has {n_tasks}", setup.gating.n_tasks),
        ));
    }
    if setup.mlp.n_outputs != setup.tasks.n_outputs() {
        return Err(Error::invalid(
            "mlp config",
            format!("n_outputs {} but tasks need {}", setup.mlp.n_outputs, setup.tasks.n_outputs()),
        ));
    }
    let mut model = Mlp::new(setup.mlp.clone(), setup.gating.clone(), setup.seed)?;
    let mut store = ImportanceStore::new(&model.params, setup.stabilizer.method);
    let mut report = TrainReport::new(options.fingerprint.clone());
    let mut start = 0;
    if let Some(ck) = options.resume.clone() {
        ck.check_compatible(&model.params, setup.seed, &options.fingerprint)?;
        model.params = ck.params;
        store = ck.importance;
        report = ck.report;
        start = ck.next_task;
    }
    let mut snapshots = Vec::new();
    if options.keep_snapshots {
        snapshots.push(model.params.clone());
    }
    let mut task_importance = Vec::new();
    let mut adam = AdamState::new(&model.params, setup.mlp.lr);
    let mut si = matches!(setup.stabilizer.method, StabilizerMethod::Si).then(|| SiAccumulator::new(&model.params));

    for task in start..n_tasks {
        let t0 = Instant::now();
        let trace = train_task(
            &mut model,
            &setup.tasks,
            train,
            task,
            &setup.stabilizer,
            &store,
            &mut adam,
            si.as_mut(),
            setup.seed,
        );
        let trace = match trace {
            Ok(t) => t,
            Err(e) => {
                flush(&report, &options)?;
                return Err(e);
            }
        };
        let omega_k = match setup.stabilizer.method {
            StabilizerMethod::Si => si.as_mut().expect("SI accumulator").si_finalize(setup.stabilizer.zeta),
            StabilizerMethod::Ewc => {
                let view = TaskView {
                    model: &model,
                    task,
                    class_mask: setup.tasks.class_mask(task),
                };
                let idx = setup.tasks.task_indices(train, task);
                let pool = setup.tasks.batch(train, task, &idx)?.inputs;
                let mut rng = stream(setup.seed, &[FISHER_TAG, task as u64]);
                ewc_fisher(&view, &pool, &setup.stabilizer, &mut rng)?.mean_sq_grad
            }
            StabilizerMethod::None | StabilizerMethod::RlSi => model.params.zeros_like(),
        };
        store.end_of_task(&omega_k, &model.params)?;
        task_importance.push(omega_k);
        adam.reset();

        let mut row = Vec::with_capacity(task + 1);
        for j in 0..=task {
            row.push(evaluate(&model, &setup.tasks, test, j, setup.seed)?);
        }
        report.accuracy.push(row);
        report.task_seconds.push(t0.elapsed().as_secs_f64());
        report.losses.push(trace);
        if options.keep_snapshots {
            snapshots.push(model.params.clone());
        }
        if options.verbose {
            eprintln!(
                "task {task}: mean accuracy {:.4} ({:.1}s)",
                report.mean_accuracy_curve()[task],
                report.task_seconds[task]
            );
        }
        flush(&report, &options)?;
        if options.checkpoints {
            if let Some(dir) = &options.out_dir {
                let ck = Checkpoint {
                    seed: setup.seed,
                    next_task: task + 1,
                    fingerprint: options.fingerprint.clone(),
                    params: model.params.clone(),
                    importance: store.clone(),
                    report: report.clone(),
                };
                ck.write(&checkpoint_path(dir, task))?;
            }
        }
    }
    Ok(SequenceOutcome {
        report,
        model,
        importance: store,
        task_importance,
        snapshots,
    })
}

fn flush(report: &TrainReport, options: &SequenceOptions) -> Result<()> {
    match &options.out_dir {
        Some(dir) => report.write(dir),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = TrainReport::new("abc");
        r.accuracy = vec![vec![0.5], vec![0.25, 0.75]];
        assert_eq!(r.to_csv(), "after_task,eval_task,accuracy\n0,0,0.5\n1,0,0.25\n1,1,0.75\n");
        assert_eq!(r.mean_final_accuracy(), 0.5);
        assert_eq!(r.mean_accuracy_curve(), vec![0.5, 0.5]);
    }
}
