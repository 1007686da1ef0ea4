//! Per-task activity masks over hidden units and task-identity context
//! vectors.

use forgetgate_autodiff::{stream, Graph, Rng, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const XDG_TAG: u64 = 0x7864_67;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateVariant {
    None,
    /// Disjoint contiguous blocks; task k uses block `k mod n_subnets`.
    Split { n_subnets: usize },
    /// A fixed random fraction of each hidden layer is silenced per task.
    Xdg { gate_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingScheme {
    pub variant: GateVariant,
    /// Feed a trainable projection of the task one-hot into hidden layers.
    pub context: bool,
    pub n_tasks: usize,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

/// Binary mask per hidden layer (1 = active, 0 = gated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateMask {
    pub task_index: usize,
    pub layers: Vec<Vec<f64>>,
}

impl GateMask {
    pub fn active_count(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&m| m != 0.0).count()
    }

    pub fn active_units(&self, layer: usize) -> Vec<usize> {
        self.layers[layer]
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers.iter().flatten().all(|&m| m == 1.0)
    }
}

impl GatingScheme {
    pub fn new(variant: GateVariant, context: bool, n_tasks: usize, layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let s = Self {
            variant,
            context,
            n_tasks,
            layer_sizes,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn ungated(n_tasks: usize, layer_sizes: Vec<usize>) -> Self {
        Self {
            variant: GateVariant::None,
            context: false,
            n_tasks,
            layer_sizes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::invalid("gating", "n_tasks must be at least 1"));
        }
        match self.variant {
            GateVariant::Xdg { gate_fraction } if !(0.0..1.0).contains(&gate_fraction) => Err(Error::invalid(
                "gating",
                format!("gate fraction must be in [0, 1), got {gate_fraction}"),
            )),
            GateVariant::Split { n_subnets } if n_subnets == 0 => {
                Err(Error::invalid("gating", "split needs at least one subnetwork"))
            }
            GateVariant::Split { n_subnets } if self.layer_sizes.iter().any(|&n| n < n_subnets) => Err(
                Error::invalid("gating", format!("layers {:?} too small for {n_subnets} subnetworks", self.layer_sizes)),
            ),
            _ => Ok(()),
        }
    }

    /// Active units per layer under XdG: `round((1 − X)·n)`.
    pub fn xdg_active_count(gate_fraction: f64, n: usize) -> usize {
        ((1.0 - gate_fraction) * n as f64).round() as usize
    }

    pub fn mask_for_task(&self, task_index: usize) -> Result<GateMask> {
        if task_index >= self.n_tasks {
            return Err(Error::invalid(
                "task index",
                format!("{task_index} out of range for {} tasks", self.n_tasks),
            ));
        }
        let layers = self
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| match self.variant {
                GateVariant::None => vec![1.0; n],
                GateVariant::Xdg { gate_fraction } => {
                    let k = Self::xdg_active_count(gate_fraction, n);
                    let mut rng = stream(self.seed, &[XDG_TAG, l as u64, task_index as u64]);
                    let mut mask = vec![0.0; n];
                    for i in partial_shuffle(n, k, &mut rng) {
                        mask[i] = 1.0;
                    }
                    mask
                }
                GateVariant::Split { n_subnets } => {
                    let block = task_index % n_subnets;
                    let (lo, hi) = (block * n / n_subnets, (block + 1) * n / n_subnets);
                    (0..n).map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 }).collect()
                }
            })
            .collect();
        Ok(GateMask { task_index, layers })
    }

    pub fn masks(&self) -> Result<Vec<GateMask>> {
        (0..self.n_tasks).map(|t| self.mask_for_task(t)).collect()
    }
}

/// First `k` entries of a Fisher–Yates shuffle of `0..n`.
fn partial_shuffle(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + rng.random_range(0..(n - i) as u64) as usize;
        p.swap(i, j);
    }
    p.truncate(k);
    p
}

/// Multiplies each row of `hidden` by one layer of a mask on the tape, so
/// gated units get exactly zero activation and gradient.
pub fn apply_gate(graph: &mut Graph, hidden: Var, mask: &[f64]) -> Result<Var> {
    if graph.value(hidden).cols() != mask.len() {
        return Err(Error::invalid(
            "gate",
            format!("mask of {} units for hidden shape {:?}", mask.len(), graph.value(hidden).shape()),
        ));
    }
    Ok(graph.mul_row_const(hidden, mask.to_vec())?)
}

/// One-hot task identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

pub fn context_vector(task_index: usize, n_tasks: usize) -> Result<ContextVector> {
    if task_index >= n_tasks {
        return Err(Error::invalid(
            "task index",
            format!("{task_index} out of range for {n_tasks} tasks"),
        ));
    }
    let mut v = vec![0.0; n_tasks];
    v[task_index] = 1.0;
    Ok(ContextVector(v))
}

impl ContextVector {
    /// The one-hot repeated over `rows` rows.
    pub fn batch(&self, rows: usize) -> Tensor {
        let n = self.0.len();
        let mut t = Tensor::zeros(&[rows, n]);
        for r in 0..rows {
            t.row_mut(r).copy_from_slice(&self.0);
        }
        t
    }
}

/// Weights and biases of the hidden layers of an MLP with the given
/// widths. The output head is shared by all subnetworks of a split
/// network, so it is not part of the count.
pub fn hidden_param_count(input_dim: usize, widths: &[usize]) -> usize {
    let mut fan_in = input_dim;
    let mut total = 0;
    for &w in widths {
        total += fan_in * w + w;
        fan_in = w;
    }
    total
}

/// Largest uniform subnetwork width `w` such that `n_subnets` subnetworks
/// of width `w` have no more hidden-layer parameters than the full
/// network.
pub fn split_layer_sizes(input_dim: usize, hidden: &[usize], n_subnets: usize) -> Result<usize> {
    if n_subnets == 0 {
        return Err(Error::invalid("split", "n_subnets must be at least 1"));
    }
    if n_subnets == 1 {
        return Ok(hidden.iter().copied().max().unwrap_or(0));
    }
    let budget = hidden_param_count(input_dim, hidden);
    let cost = |w: usize| n_subnets * hidden_param_count(input_dim, &vec![w; hidden.len()]);
    let (mut lo, mut hi) = (0usize, hidden.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if cost(mid) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}
