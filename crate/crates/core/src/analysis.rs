//! Post-hoc analyses of trained networks: single-synapse perturbation,
//! importance-binned parameter distances, and flexibility versus accuracy.

use forgetgate_autodiff::{stream, ParameterSet, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::mlp::{masked_argmax, Mlp};
use crate::trainer::TrainReport;

pub const N_BINS: usize = 80;
pub const OMEGA_MIN: f64 = 1e-3;
pub const OMEGA_MAX: f64 = 10.0;
const PERTURB_TAG: u64 = 0x7065_7274;

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1, ties get their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub layer: String,
    pub row: usize,
    pub col: usize,
    pub importance: f64,
    pub delta_acc_plus: f64,
    pub delta_acc_minus: f64,
}

impl PerturbationRecord {
    pub fn mean_delta(&self) -> f64 {
        (self.delta_acc_plus + self.delta_acc_minus) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStudy {
    pub base_mean_accuracy: f64,
    pub records: Vec<PerturbationRecord>,
    /// Pearson correlation of importance with mean Δaccuracy.
    pub pearson_r: f64,
}

impl PerturbationStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,row,col,importance,delta_acc_plus,delta_acc_minus\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer, r.row, r.col, r.importance, r.delta_acc_plus, r.delta_acc_minus
            ));
        }
        s
    }
}

/// Cached last-hidden activations and logits of one task's test items.
struct TaskCache {
    hidden: Tensor,
    logits: Tensor,
    classes: Vec<usize>,
    mask: Option<Vec<bool>>,
}

impl TaskCache {
    /// Accuracy with output weight `(i, j)` shifted by `delta`.
    fn accuracy_with(&self, i: usize, j: usize, delta: f64, scratch: &mut Vec<f64>) -> f64 {
        let mut correct = 0;
        for (r, &c) in self.classes.iter().enumerate() {
            scratch.clear();
            scratch.extend_from_slice(self.logits.row(r));
            scratch[j] += delta * self.hidden.get2(r, i);
            if masked_argmax(scratch, self.mask.as_deref()) == c {
                correct += 1;
            }
        }
        correct as f64 / self.classes.len() as f64
    }
}

/// Shifts `n_synapses` randomly chosen output-layer weights one at a time
/// by `+delta` and `-delta` and records the change in mean accuracy over
/// all tasks. Only logits move, so each task's last-hidden activations are
/// computed once; the model is never modified.
pub fn perturbation_study(
    model: &Mlp,
    tasks: &TaskSequence,
    test: &LabeledDataset,
    omega: &[Tensor],
    n_synapses: usize,
    delta: f64,
    seed: u64,
) -> Result<PerturbationStudy> {
    model.params.check_shapes(omega, "perturbation_study")?;
    let wi = model.output_weight;
    let (rows, cols) = (model.params.get(wi).rows(), model.params.get(wi).cols());
    let n_tasks = tasks.n_tasks();
    if n_tasks > model.n_tasks() {
        return Err(Error::invalid("perturbation_study", "sequence has more tasks than the model"));
    }
    let mut caches = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let idx = tasks.task_indices(test, k);
        let batch = tasks.batch(test, k, &idx)?;
        caches.push(TaskCache {
            hidden: model.last_hidden(&batch.inputs, k)?,
            logits: model.logits(&batch.inputs, k)?,
            classes: batch.classes,
            mask: tasks.class_mask(k),
        });
    }
    let mut scratch = Vec::new();
    let base: Vec<f64> = caches.iter().map(|c| c.accuracy_with(0, 0, 0.0, &mut scratch)).collect();
    let base_mean = base.iter().sum::<f64>() / n_tasks as f64;
    let mut rng = stream(seed, &[PERTURB_TAG]);
    let n = n_synapses.min(rows * cols);
    let picks = sample(&mut rng, rows * cols, n);
    let name = model.params.names()[wi].clone();
    let mut records = Vec::with_capacity(n);
    for flat in picks.iter() {
        let (i, j) = (flat / cols, flat % cols);
        let mut deltas = [0.0; 2];
        for (s, d) in deltas.iter_mut().zip([delta, -delta]) {
            let acc: f64 = caches.iter().map(|c| c.accuracy_with(i, j, d, &mut scratch)).sum();
            *s = acc / n_tasks as f64 - base_mean;
        }
        records.push(PerturbationRecord {
            layer: name.clone(),
            row: i,
            col: j,
            importance: omega[wi].get2(i, j),
            delta_acc_plus: deltas[0],
            delta_acc_minus: deltas[1],
        });
    }
    let om: Vec<f64> = records.iter().map(|r| r.importance).collect();
    let dm: Vec<f64> = records.iter().map(PerturbationRecord::mean_delta).collect();
    Ok(PerturbationStudy {
        base_mean_accuracy: base_mean,
        pearson_r: pearson(&om, &dm),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceHistogram {
    pub layer: String,
    /// 81 edges, log-spaced over `[1e-3, 10]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Euclidean norm of the parameter change within each bin.
    pub bin_distance: Vec<f64>,
    /// Euclidean norm of the change over the whole tensor.
    pub distance: f64,
    /// `Σ Ω (Δθ)²`.
    pub weighted_distance: f64,
}

pub fn bin_edges() -> Vec<f64> {
    let (lo, hi) = (OMEGA_MIN.log10(), OMEGA_MAX.log10());
    (0..=N_BINS)
        .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / N_BINS as f64))
        .collect()
}

/// Bin of an importance value after clamping to `≥ 1e-3`. Bins are
/// half-open `[lo, hi)`; values at or above the top edge go to the last
/// bin so that every parameter is counted.
pub fn bin_index(edges: &[f64], omega: f64) -> usize {
    let w = omega.max(OMEGA_MIN);
    let k = edges.partition_point(|&e| e <= w);
    k.saturating_sub(1).min(N_BINS - 1)
}

/// Per-tensor importance histograms of the change from `before` to
/// `after`.
pub fn distance_by_importance(
    before: &ParameterSet,
    after: &ParameterSet,
    omega: &[Tensor],
) -> Result<Vec<ImportanceHistogram>> {
    before.check_shapes(after.tensors(), "distance_by_importance")?;
    before.check_shapes(omega, "distance_by_importance")?;
    let edges = bin_edges();
    let mut out = Vec::with_capacity(before.len());
    for k in 0..before.len() {
        let mut counts = vec![0usize; N_BINS];
        let mut sq = vec![0.0; N_BINS];
        let (mut total, mut weighted) = (0.0, 0.0);
        for ((&a, &b), &w) in before.get(k).data().iter().zip(after.get(k).data()).zip(omega[k].data()) {
            let d2 = (b - a) * (b - a);
            let bin = bin_index(&edges, w);
            counts[bin] += 1;
            sq[bin] += d2;
            total += d2;
            weighted += w * d2;
        }
        out.push(ImportanceHistogram {
            layer: before.names()[k].clone(),
            edges: edges.clone(),
            counts,
            bin_distance: sq.into_iter().map(f64::sqrt).collect(),
            distance: total.sqrt(),
            weighted_distance: weighted,
        });
    }
    Ok(out)
}

pub fn histograms_to_csv(hists: &[ImportanceHistogram]) -> String {
    let mut s = String::from("layer,bin,lo,hi,count,distance\n");
    for h in hists {
        for b in 0..N_BINS {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                h.layer,
                b,
                h.edges[b],
                h.edges[b + 1],
                h.counts[b],
                h.bin_distance[b]
            ));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityPoint {
    pub task: usize,
    pub distance: f64,
    pub accuracy: f64,
}

/// Euclidean distance over all parameters between consecutive task
/// boundaries, paired with the accuracy on the task just learned.
/// `snapshots[0]` is the initialization and `snapshots[k + 1]` the state
/// after task `k`.
pub fn accuracy_vs_flexibility(report: &TrainReport, snapshots: &[ParameterSet]) -> Result<Vec<FlexibilityPoint>> {
    let n = report.accuracy.len();
    if snapshots.len() != n + 1 {
        return Err(Error::invalid(
            "accuracy_vs_flexibility",
            format!("{n} tasks need {} snapshots, got {}", n + 1, snapshots.len()),
        ));
    }
    (0..n)
        .map(|k| {
            let (a, b) = (&snapshots[k], &snapshots[k + 1]);
            a.check_shapes(b.tensors(), "accuracy_vs_flexibility")?;
            let d2: f64 = a
                .tensors()
                .iter()
                .zip(b.tensors())
                .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (q - p) * (q - p)))
                .sum();
            Ok(FlexibilityPoint {
                task: k,
                distance: d2.sqrt(),
                accuracy: report.accuracy[k][k],
            })
        })
        .collect()
}

pub fn flexibility_to_csv(points: &[FlexibilityPoint]) -> String {
    let mut s = String::from("task,distance,new_task_accuracy\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.task, p.distance, p.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlations() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[8.0, 6.0, 4.0, 2.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 10.0, 100.0, 1000.0]) - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn edges_and_bins() {
        let e = bin_edges();
        assert_eq!(e.len(), N_BINS + 1);
        assert!((e[0] - 1e-3).abs() < 1e-15 && (e[N_BINS] - 10.0).abs() < 1e-12);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(bin_index(&e, 0.0), 0);
        assert_eq!(bin_index(&e, 1e-3), 0);
        assert_eq!(bin_index(&e, e[1]), 1);
        assert_eq!(bin_index(&e, 1e6), N_BINS - 1);
    }

    #[test]
    fn single_parameter_weighted_distance() {
        let mut a = ParameterSet::new();
        a.push("w", Tensor::vector(vec![1.0]));
        let mut b = ParameterSet::new();
        b.push("w", Tensor::vector(vec![1.5]));
        let h = distance_by_importance(&a, &b, &[Tensor::vector(vec![2.0])]).unwrap();
        assert!((h[0].weighted_distance - 0.5).abs() < 1e-15);
        assert!((h[0].distance - 0.5).abs() < 1e-15);
        let same = distance_by_importance(&a, &a, &[Tensor::vector(vec![2.0])]).unwrap();
        assert_eq!(same[0].distance, 0.0);
        assert!(same[0].bin_distance.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn flexibility_needs_all_snapshots() {
        let mut r = TrainReport::new("");
        r.accuracy = vec![vec![0.9]];
        let mut p = ParameterSet::new();
        p.push("w", Tensor::vector(vec![0.0, 0.0]));
        let mut q = ParameterSet::new();
        q.push("w", Tensor::vector(vec![3.0, 4.0]));
        assert!(accuracy_vs_flexibility(&r, std::slice::from_ref(&p)).is_err());
        let pts = accuracy_vs_flexibility(&r, &[p, q]).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].distance, 5.0);
        assert_eq!(pts[0].accuracy, 0.9);
    }
}
