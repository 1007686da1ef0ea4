//! Gated LSTM agent on the cognitive tasks, trained with masked
//! cross-entropy or with actor-critic reinforcement learning.

use std::time::Instant;

use forgetgate_autodiff::{sigmoid, softmax, stream, AdamState, Graph, ParameterSet, Rng, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cogtask::{sample_batch, Action, TaskId, TrialBatch, TrialSpec, N_ACTIONS, N_INPUTS, N_INPUTS_WITH_RULE};
use crate::error::{Error, Result};
use crate::gating::{GateVariant, GatingScheme};
use crate::stabilization::{sample_categorical, ImportanceStore, SiAccumulator, StabilizerConfig, StabilizerMethod};
use crate::trainer::{LossTrace, TrainReport};

const INIT_TAG: u64 = 0x6c73_746d;
const TRAIN_TAG: u64 = 0x726e_6e74;
const EVAL_TAG: u64 = 0x726e_6e65;

pub const REWARD_BREAK_FIXATION: f64 = -1.0;
pub const REWARD_WRONG_DIRECTION: f64 = -0.01;
pub const REWARD_CORRECT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    /// Value-loss weight.
    pub beta: f64,
    /// Entropy weight.
    pub alpha: f64,
    pub lr: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            beta: 0.01,
            alpha: 1e-4,
            lr: 5e-4,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("rl config", format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("rl config", "alpha and beta must be ≥ 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("rl config", "lr must be positive"));
        }
        Ok(())
    }
}

/// LSTM with fused gate weights (column blocks i, f, o, g) and policy and
/// value readouts from the hidden state.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub n_inputs: usize,
    pub n_cells: usize,
    pub params: ParameterSet,
}

pub const W_X: usize = 0;
pub const W_H: usize = 1;
pub const B: usize = 2;
pub const W_PI: usize = 3;
pub const B_PI: usize = 4;
pub const W_V: usize = 5;
pub const B_V: usize = 6;

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("sizes agree")
}

impl Lstm {
    /// Weights U(±1/√fan_in), zero biases.
    pub fn new(n_inputs: usize, n_cells: usize, seed: u64) -> Result<Self> {
        if n_inputs == 0 || n_cells == 0 {
            return Err(Error::invalid("lstm", "sizes must be positive"));
        }
        let mut rng = stream(seed, &[INIT_TAG]);
        let mut params = ParameterSet::new();
        params.push("lstm.w_x", uniform(n_inputs, 4 * n_cells, 1.0 / (n_inputs as f64).sqrt(), &mut rng));
        params.push("lstm.w_h", uniform(n_cells, 4 * n_cells, 1.0 / (n_cells as f64).sqrt(), &mut rng));
        params.push("lstm.bias", Tensor::zeros(&[4 * n_cells]));
        params.push("policy.weight", uniform(n_cells, N_ACTIONS, 1.0 / (n_cells as f64).sqrt(), &mut rng));
        params.push("policy.bias", Tensor::zeros(&[N_ACTIONS]));
        params.push("value.weight", uniform(n_cells, 1, 1.0 / (n_cells as f64).sqrt(), &mut rng));
        params.push("value.bias", Tensor::zeros(&[1]));
        Ok(Self {
            n_inputs,
            n_cells,
            params,
        })
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[batch, self.n_cells]));
        let c = g.constant(Tensor::zeros(&[batch, self.n_cells]));
        (h, c)
    }
}

/// One LSTM step. A gate mask, when given, zeroes both `h'` and `c'` of
/// gated cells.
pub fn lstm_step(g: &mut Graph, vars: &[Var], x: Var, state: (Var, Var), mask: Option<&[f64]>) -> Result<(Var, Var)> {
    let (h, c) = state;
    let n = g.value(h).cols();
    if g.value(vars[W_H]).shape() != [n, 4 * n] {
        return Err(Error::invalid(
            "lstm_step",
            format!("state width {n} for recurrent weights {:?}", g.value(vars[W_H]).shape()),
        ));
    }
    let zx = g.matmul(x, vars[W_X])?;
    let zh = g.matmul(h, vars[W_H])?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, vars[B])?;
    let zi = g.slice_cols(z, 0, n)?;
    let zf = g.slice_cols(z, n, 2 * n)?;
    let zo = g.slice_cols(z, 2 * n, 3 * n)?;
    let zg = g.slice_cols(z, 3 * n, 4 * n)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let mut c2 = g.add(fc, ig)?;
    let tc = g.tanh(c2)?;
    let mut h2 = g.mul(o, tc)?;
    if let Some(m) = mask {
        h2 = g.mul_row_const(h2, m.to_vec())?;
        c2 = g.mul_row_const(c2, m.to_vec())?;
    }
    Ok((h2, c2))
}

/// Policy logits `[B, 9]` and values `[B, 1]` from a hidden state.
pub fn readout(g: &mut Graph, vars: &[Var], h: Var) -> Result<(Var, Var)> {
    let p = g.matmul(h, vars[W_PI])?;
    let p = g.add_bias(p, vars[B_PI])?;
    let v = g.matmul(h, vars[W_V])?;
    let v = g.add_bias(v, vars[B_V])?;
    Ok((p, v))
}

/// `R_τ = r_τ + γ R_{τ+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One-step advantage `r_t + γ V_{t+1} − V_t`.
pub fn advantage(r: f64, v: f64, v_next: f64, gamma: f64) -> f64 {
    r + gamma * v_next - v
}

/// Per-step reward for `action` when the trial asks for `target`, and
/// whether the episode ends.
pub fn step_reward(target: usize, action: usize) -> (f64, bool) {
    match (target, action) {
        (_, 0) if target == 0 => (0.0, false),
        (0, _) => (REWARD_BREAK_FIXATION, true),
        (_, 0) => (0.0, false),
        (t, a) if t == a => (REWARD_CORRECT, true),
        _ => (REWARD_WRONG_DIRECTION, true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Time-major record of a batch of episodes (`[t][b]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeBuffer {
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    /// 1 while the episode is running (including its final step).
    pub alive: Vec<Vec<f64>>,
}

impl EpisodeBuffer {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn total_rewards(&self) -> Vec<f64> {
        let mut tot = vec![0.0; self.batch_size()];
        for row in &self.rewards {
            for (t, r) in tot.iter_mut().zip(row) {
                *t += r;
            }
        }
        tot
    }

    pub fn mean_reward(&self) -> f64 {
        let t = self.total_rewards();
        t.iter().sum::<f64>() / t.len().max(1) as f64
    }

    /// Value of the next state, 0 past the end of the episode.
    fn next_value(&self, t: usize, b: usize) -> f64 {
        if t + 1 < self.steps() && self.alive[t + 1][b] > 0.0 {
            self.values[t + 1][b]
        } else {
            0.0
        }
    }

    /// `A_t` for every alive step (0 elsewhere).
    pub fn advantages(&self, gamma: f64) -> Vec<Vec<f64>> {
        (0..self.steps())
            .map(|t| {
                (0..self.batch_size())
                    .map(|b| {
                        if self.alive[t][b] > 0.0 {
                            advantage(self.rewards[t][b], self.values[t][b], self.next_value(t, b), gamma)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// `r_t + γ V_{t+1}`, held fixed in the value loss.
    pub fn value_targets(&self, gamma: f64) -> Vec<Vec<f64>> {
        (0..self.steps())
            .map(|t| {
                (0..self.batch_size())
                    .map(|b| self.rewards[t][b] + gamma * self.next_value(t, b))
                    .collect()
            })
            .collect()
    }
}

/// Whether each episode counts as correct: +1 for response trials, never
/// breaking fixation for fixation-only trials.
pub fn episode_correct(specs: &[TrialSpec], buffer: &EpisodeBuffer) -> Vec<bool> {
    specs
        .iter()
        .zip(buffer.total_rewards())
        .map(|(s, r)| match s.correct {
            Action::Fixate => r == 0.0,
            Action::Respond(_) => r == REWARD_CORRECT,
        })
        .collect()
}

/// Graph outputs of a rollout.
pub struct Rollout {
    pub logits: Vec<Var>,
    pub values: Vec<Var>,
    pub buffer: EpisodeBuffer,
}

/// Steps the LSTM over `batch`, choosing actions per `mode` and assigning
/// rewards; an episode ends at its first nonzero reward. Stops early once
/// every episode has ended. With `forced` actions the given actions are
/// replayed instead of chosen.
pub fn rollout(
    g: &mut Graph,
    model: &Lstm,
    vars: &[Var],
    batch: &TrialBatch,
    mask: Option<&[f64]>,
    mode: ActionMode,
    rng: Option<&mut Rng>,
    forced: Option<&[Vec<usize>]>,
) -> Result<Rollout> {
    let bsz = batch.batch_size();
    let (mut h, mut c) = model.zero_state(g, bsz);
    let mut alive = vec![1.0; bsz];
    let mut rng = rng;
    let mut out = Rollout {
        logits: Vec::new(),
        values: Vec::new(),
        buffer: EpisodeBuffer::default(),
    };
    for (t, x) in batch.inputs.iter().enumerate() {
        if alive.iter().all(|&a| a == 0.0) {
            break;
        }
        if x.cols() != model.n_inputs {
            return Err(Error::invalid(
                "rollout",
                format!("inputs of width {} for a model with {}", x.cols(), model.n_inputs),
            ));
        }
        let xv = g.constant(x.clone());
        (h, c) = lstm_step(g, vars, xv, (h, c), mask)?;
        let (p, v) = readout(g, vars, h)?;
        let (pv, vv) = (g.value(p), g.value(v));
        let mut acts = Vec::with_capacity(bsz);
        let mut rews = Vec::with_capacity(bsz);
        let mut logp = Vec::with_capacity(bsz);
        let mut vals = Vec::with_capacity(bsz);
        let step_alive = alive.clone();
        for b in 0..bsz {
            let probs = softmax(pv.row(b));
            let a = match (forced, mode) {
                (Some(f), _) => f[t][b],
                (None, ActionMode::Greedy) => argmax(&probs),
                (None, ActionMode::Sample) => {
                    let r = rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("rollout", "sampling needs an rng"))?;
                    sample_categorical(&probs, r)
                }
            };
            let (r, done) = if alive[b] > 0.0 {
                step_reward(batch.target_action(t, b), a)
            } else {
                (0.0, false)
            };
            if done {
                alive[b] = 0.0;
            }
            acts.push(a);
            rews.push(r);
            logp.push(probs[a].max(f64::MIN_POSITIVE).ln());
            vals.push(vv.get2(b, 0));
        }
        out.buffer.actions.push(acts);
        out.buffer.rewards.push(rews);
        out.buffer.log_probs.push(logp);
        out.buffer.values.push(vals);
        out.buffer.alive.push(step_alive);
        out.logits.push(p);
        out.values.push(v);
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Data held fixed inside the actor-critic loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossData {
    pub actions: Vec<Vec<usize>>,
    pub alive: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub value_targets: Vec<Vec<f64>>,
}

impl LossData {
    pub fn from_buffer(buffer: &EpisodeBuffer, gamma: f64) -> Self {
        Self {
            actions: buffer.actions.clone(),
            alive: buffer.alive.clone(),
            advantages: buffer.advantages(gamma),
            value_targets: buffer.value_targets(gamma),
        }
    }
}

/// `L = L_P + β L_V − α L_H`, each averaged over `B·T` with dead steps
/// masked out:
/// `L_P = −Σ A log π(a)`, `L_V = ½ Σ (V − target)²`, `L_H = −Σ_a π log π`.
pub fn actor_critic_loss(g: &mut Graph, logits: &[Var], values: &[Var], data: &LossData, cfg: &RlConfig) -> Result<Var> {
    let steps = logits.len();
    if values.len() != steps || data.actions.len() != steps {
        return Err(Error::invalid("actor_critic_loss", "step counts disagree"));
    }
    let bsz = data.actions.first().map_or(0, Vec::len);
    let norm = 1.0 / (bsz * steps).max(1) as f64;
    let mut total: Option<Var> = None;
    let mut accumulate = |g: &mut Graph, term: Var| -> Result<()> {
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
        Ok(())
    };
    for t in 0..steps {
        let logp = g.log_softmax(logits[t])?;
        let mut wp = Tensor::zeros(&[bsz, N_ACTIONS]);
        let mut wh = Tensor::zeros(&[bsz, N_ACTIONS]);
        let mut vt = Tensor::zeros(&[bsz, 1]);
        let mut vw = Tensor::zeros(&[bsz, 1]);
        for b in 0..bsz {
            let alive = data.alive[t][b];
            wp.set2(b, data.actions[t][b], -data.advantages[t][b] * alive * norm);
            wh.row_mut(b).fill(cfg.alpha * alive * norm);
            vt.set2(b, 0, data.value_targets[t][b]);
            vw.set2(b, 0, alive);
        }
        let lp = g.mul_const(logp, wp)?;
        let lp = g.sum(lp)?;
        accumulate(g, lp)?;
        if cfg.alpha != 0.0 {
            // −α L_H = +α Σ π log π.
            let pi = g.softmax(logits[t])?;
            let plogp = g.mul(pi, logp)?;
            let ent = g.mul_const(plogp, wh)?;
            let ent = g.sum(ent)?;
            accumulate(g, ent)?;
        }
        let neg = vt.scale(-1.0);
        let d = g.add_const(values[t], &neg)?;
        let d = g.mul_const(d, vw)?;
        let sq = g.square(d)?;
        let sq = g.sum(sq)?;
        let lv = g.scale(sq, 0.5 * cfg.beta * norm)?;
        accumulate(g, lv)?;
    }
    total.ok_or_else(|| Error::invalid("actor_critic_loss", "empty episode"))
}

/// Mean per-step policy entropy over alive steps.
pub fn mean_entropy(g: &Graph, logits: &[Var], alive: &[Vec<f64>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for (t, &l) in logits.iter().enumerate() {
        let lv = g.value(l);
        for (b, &a) in alive[t].iter().enumerate() {
            if a > 0.0 {
                sum += entropy(&softmax(lv.row(b)));
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        0.0
    } else {
        sum / n
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Per-step masked cross-entropy against the trial targets, averaged
/// over `B·T`.
pub fn supervised_loss(g: &mut Graph, logits: &[Var], batch: &TrialBatch) -> Result<Var> {
    let steps = logits.len();
    let bsz = batch.batch_size();
    let norm = 1.0 / (bsz * steps).max(1) as f64;
    let mut total: Option<Var> = None;
    for (t, &l) in logits.iter().enumerate() {
        let w = batch.masks[t].iter().map(|m| m * norm).collect();
        let ce = g.cross_entropy(l, batch.targets[t].clone(), Some(w), None)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    total.ok_or_else(|| Error::invalid("supervised_loss", "empty batch"))
}

/// Full-trial logits (no early stopping) for supervised training.
pub fn unroll(g: &mut Graph, model: &Lstm, vars: &[Var], batch: &TrialBatch, mask: Option<&[f64]>) -> Result<Vec<Var>> {
    let (mut h, mut c) = model.zero_state(g, batch.batch_size());
    let mut out = Vec::with_capacity(batch.inputs.len());
    for x in &batch.inputs {
        let xv = g.constant(x.clone());
        (h, c) = lstm_step(g, vars, xv, (h, c), mask)?;
        out.push(readout(g, vars, h)?.0);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningMethod {
    Supervised,
    Rl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnConfig {
    pub tasks: Vec<TaskId>,
    pub method: LearningMethod,
    #[serde(default = "default_cells")]
    pub n_cells: usize,
    #[serde(default = "default_rnn_batch")]
    pub batch_size: usize,
    pub batches_per_task: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Learning rate for supervised training; RL uses `rl.lr`.
    #[serde(default = "default_sup_lr")]
    pub lr: f64,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default)]
    pub rule_cue: bool,
    pub gating: GateVariant,
    pub stabilizer: StabilizerConfig,
    pub seed: u64,
}

fn default_cells() -> usize {
    128
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

impl RnnConfig {
    pub fn n_inputs(&self) -> usize {
        if self.rule_cue {
            N_INPUTS_WITH_RULE
        } else {
            N_INPUTS
        }
    }

    pub fn gating_scheme(&self) -> Result<GatingScheme> {
        GatingScheme::new(self.gating, false, self.tasks.len().max(1), vec![self.n_cells], self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("rnn config", "no tasks"));
        }
        if self.batch_size == 0 || self.batches_per_task == 0 || self.eval_batches == 0 {
            return Err(Error::invalid("rnn config", "batch counts must be positive"));
        }
        self.rl.validate()?;
        self.stabilizer.validate()?;
        if self.stabilizer.method == StabilizerMethod::Ewc {
            return Err(Error::invalid("rnn config", "EWC is not supported for the recurrent agent"));
        }
        self.gating_scheme().map(|_| ())
    }
}

pub struct RnnOutcome {
    pub report: TrainReport,
    pub model: Lstm,
    pub importance: ImportanceStore,
    /// Mean policy entropy at evaluation, before training and after each
    /// task (on that task).
    pub entropy_before: f64,
    pub entropy_after: Vec<f64>,
}

/// Greedy correctness on fresh trials of `task`, and the mean policy
/// entropy over alive steps.
pub fn evaluate_rnn(model: &Lstm, cfg: &RnnConfig, mask: Option<&[f64]>, task: TaskId, seed: u64) -> Result<(f64, f64)> {
    let mut rng = stream(seed, &[EVAL_TAG, task.index() as u64]);
    let (mut correct, mut total, mut ent) = (0usize, 0usize, 0.0);
    for _ in 0..cfg.eval_batches {
        let batch = sample_batch(task, cfg.batch_size, cfg.rule_cue, &mut rng);
        let mut g = Graph::new();
        let vars = model.params.register(&mut g);
        let ro = rollout(&mut g, model, &vars, &batch, mask, ActionMode::Greedy, None, None)?;
        correct += episode_correct(&batch.specs, &ro.buffer).iter().filter(|&&c| c).count();
        total += batch.batch_size();
        ent += mean_entropy(&g, &ro.logits, &ro.buffer.alive);
    }
    Ok((correct as f64 / total as f64, ent / cfg.eval_batches as f64))
}

/// Trains the tasks of `cfg` in order, evaluating greedily on every task
/// seen so far after each one.
pub fn train_sequence_rnn(cfg: &RnnConfig, verbose: bool) -> Result<RnnOutcome> {
    cfg.validate()?;
    let scheme = cfg.gating_scheme()?;
    let mut model = Lstm::new(cfg.n_inputs(), cfg.n_cells, cfg.seed)?;
    let mut store = ImportanceStore::new(&model.params, cfg.stabilizer.method);
    let lr = match cfg.method {
        LearningMethod::Supervised => cfg.lr,
        LearningMethod::Rl => cfg.rl.lr,
    };
    let mut adam = AdamState::new(&model.params, lr);
    let mut acc = SiAccumulator::new(&model.params);
    let mut report = TrainReport::new(String::new());
    let masks: Vec<Vec<f64>> = (0..cfg.tasks.len())
        .map(|k| scheme.mask_for_task(k).map(|m| m.layers[0].clone()))
        .collect::<Result<_>>()?;
    let gated = !matches!(cfg.gating, GateVariant::None);
    let mask_of = |k: usize| gated.then(|| masks[k].as_slice());
    let entropy_before = evaluate_rnn(&model, cfg, mask_of(0), cfg.tasks[0], cfg.seed)?.1;
    let mut entropy_after = Vec::new();
    let penalize = cfg.stabilizer.method != StabilizerMethod::None && cfg.stabilizer.c != 0.0;

    for (k, &task) in cfg.tasks.iter().enumerate() {
        let t0 = Instant::now();
        let mut rng = stream(cfg.seed, &[TRAIN_TAG, k as u64]);
        let mut trace = LossTrace::default();
        let mask = mask_of(k);
        for step in 0..cfg.batches_per_task {
            let batch = sample_batch(task, cfg.batch_size, cfg.rule_cue, &mut rng);
            let mut g = Graph::new();
            let vars = model.params.register(&mut g);
            let (loss, mean_reward) = match cfg.method {
                LearningMethod::Supervised => {
                    let logits = unroll(&mut g, &model, &vars, &batch, mask)?;
                    (supervised_loss(&mut g, &logits, &batch)?, None)
                }
                LearningMethod::Rl => {
                    let ro = rollout(&mut g, &model, &vars, &batch, mask, ActionMode::Sample, Some(&mut rng), None)?;
                    let data = LossData::from_buffer(&ro.buffer, cfg.rl.gamma);
                    let mr = ro.buffer.mean_reward();
                    (actor_critic_loss(&mut g, &ro.logits, &ro.values, &data, &cfg.rl)?, Some(mr))
                }
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    task: k,
                    message: format!("non-finite loss at batch {step}"),
                });
            }
            let mut gm = g.backward(loss)?;
            let task_grads: Vec<Tensor> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, p)| gm.take_or_zeros(v, p.shape()))
                .collect();
            drop(g);
            let mut total = task_grads.clone();
            if penalize {
                store.add_penalty_grad(&model.params, cfg.stabilizer.c, &mut total)?;
            }
            let before = model.params.clone();
            adam.step(&mut model.params, &total)?;
            match (cfg.stabilizer.method, mean_reward) {
                (StabilizerMethod::Si, _) => acc.si_batch_update(&before, &model.params, &task_grads)?,
                (StabilizerMethod::RlSi, Some(r)) => acc.rl_si_batch_update(&before, &model.params, r)?,
                (StabilizerMethod::RlSi, None) => {
                    return Err(Error::invalid("rnn config", "reward-based SI needs RL training"));
                }
                _ => {}
            }
            trace.task_loss.push(lv);
            if verbose && (step + 1) % 100 == 0 {
                match mean_reward {
                    Some(r) => eprintln!("{} batch {}: loss {lv:.5} mean reward {r:.4}", task.name(), step + 1),
                    None => eprintln!("{} batch {}: loss {lv:.5}", task.name(), step + 1),
                }
            }
        }
        let omega_k = match cfg.stabilizer.method {
            StabilizerMethod::Si => acc.si_finalize(cfg.stabilizer.zeta),
            StabilizerMethod::RlSi => acc.rl_si_finalize(cfg.stabilizer.zeta),
            _ => {
                acc.reset();
                model.params.zeros_like()
            }
        };
        store.end_of_task(&omega_k, &model.params)?;
        adam.reset();
        let mut row = Vec::with_capacity(k + 1);
        for (j, &tj) in cfg.tasks[..=k].iter().enumerate() {
            let (a, e) = evaluate_rnn(&model, cfg, mask_of(j), tj, cfg.seed)?;
            if j == k {
                entropy_after.push(e);
            }
            row.push(a);
        }
        if verbose {
            eprintln!("after {}: {:?}", task.name(), row);
        }
        report.accuracy.push(row);
        report.task_seconds.push(t0.elapsed().as_secs_f64());
        report.losses.push(trace);
    }
    Ok(RnnOutcome {
        report,
        model,
        importance: store,
        entropy_before,
        entropy_after,
    })
}

/// One episode for offline inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub spec: TrialSpec,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub steps_alive: usize,
}

pub fn episode_traces(batch: &TrialBatch, buffer: &EpisodeBuffer) -> Vec<EpisodeTrace> {
    (0..batch.batch_size())
        .map(|b| {
            let steps_alive = buffer.alive.iter().filter(|a| a[b] > 0.0).count();
            let col = |m: &Vec<Vec<f64>>| m[..steps_alive].iter().map(|r| r[b]).collect();
            EpisodeTrace {
                spec: batch.specs[b].clone(),
                actions: buffer.actions[..steps_alive].iter().map(|r| r[b]).collect(),
                rewards: col(&buffer.rewards),
                values: col(&buffer.values),
                log_probs: col(&buffer.log_probs),
                steps_alive,
            }
        })
        .collect()
}

/// Closed-form LSTM cell for a single example, used to cross-check the
/// graph step.
pub fn lstm_step_reference(params: &ParameterSet, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let wx = params.get(W_X);
    let wh = params.get(W_H);
    let b = params.get(B).data();
    let mut z = b.to_vec();
    for (j, zj) in z.iter_mut().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            *zj += xi * wx.get2(i, j);
        }
        for (i, &hi) in h.iter().enumerate() {
            *zj += hi * wh.get2(i, j);
        }
    }
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for j in 0..n {
        let (i, f, o, g) = (sigmoid(z[j]), sigmoid(z[n + j]), sigmoid(z[2 * n + j]), z[3 * n + j].tanh());
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}
