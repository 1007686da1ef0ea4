//! Trial generator for the 20 fixation/saccade cognitive tasks.
//!
//! Trials last 100 steps of 20 ms. Inputs are 4 fixation units, two
//! populations of 32 direction-tuned motion units (one per location) and an
//! optional 20-unit one-hot rule cue. Targets are one-hot over 9 actions:
//! index 0 is "fixate", index `1 + d` is a saccade towards direction `d`
//! (angle `d·π/4`).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use forgetgate_autodiff::{Rng, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STEP_MS: u32 = 20;
pub const TRIAL_MS: u32 = 2000;
pub const N_STEPS: usize = (TRIAL_MS / STEP_MS) as usize;
pub const N_DIRECTIONS: usize = 8;
pub const N_ACTIONS: usize = 9;
pub const N_FIXATION_UNITS: usize = 4;
pub const N_MOTION_UNITS: usize = 32;
pub const N_TASKS: usize = 20;
pub const N_INPUTS: usize = N_FIXATION_UNITS + 2 * N_MOTION_UNITS;
pub const N_INPUTS_WITH_RULE: usize = N_INPUTS + N_TASKS;
/// Steps at the start of a trial excluded from the supervised loss.
pub const GRACE_STEPS: usize = 5;
pub const TUNING_KAPPA: f64 = 2.0;
pub const INPUT_NOISE_SD: f64 = 0.1;
pub const DM_COHERENCES: [f64; 3] = [0.1, 0.2, 0.4];
pub const DM_DURATIONS_MS: [u32; 3] = [200, 400, 800];
pub const DELAYS_MS: [u32; 3] = [200, 400, 800];
pub const DLY_GO_FIX_OFF_MS: [u32; 3] = [900, 1100, 1500];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Go,
    RtGo,
    DlyGo,
    AntiGo,
    RtAntiGo,
    DlyAntiGo,
    Dm1,
    Dm2,
    CtxDm1,
    CtxDm2,
    MultStimDm,
    DlyDm1,
    DlyDm2,
    CtxDlyDm1,
    CtxDlyDm2,
    MultStimDlyDm,
    Dms,
    Adms,
    Dmc,
    Admc,
}

pub const ALL_TASKS: [TaskId; N_TASKS] = [
    TaskId::Go,
    TaskId::RtGo,
    TaskId::DlyGo,
    TaskId::AntiGo,
    TaskId::RtAntiGo,
    TaskId::DlyAntiGo,
    TaskId::Dm1,
    TaskId::Dm2,
    TaskId::CtxDm1,
    TaskId::CtxDm2,
    TaskId::MultStimDm,
    TaskId::DlyDm1,
    TaskId::DlyDm2,
    TaskId::CtxDlyDm1,
    TaskId::CtxDlyDm2,
    TaskId::MultStimDlyDm,
    TaskId::Dms,
    TaskId::Adms,
    TaskId::Dmc,
    TaskId::Admc,
];

/// The six-task subset used for quick sequential runs.
pub const DESK_TASKS: [TaskId; 6] = [
    TaskId::Go,
    TaskId::RtGo,
    TaskId::DlyGo,
    TaskId::AntiGo,
    TaskId::Dm1,
    TaskId::Dms,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskGroup {
    Go,
    AntiGo,
    Dm,
    DlyDm,
    Matching,
}

impl TaskId {
    pub fn index(self) -> usize {
        ALL_TASKS.iter().position(|&t| t == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ALL_TASKS
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("task id", format!("{i} out of range for {N_TASKS} tasks")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Go => "Go",
            TaskId::RtGo => "RT Go",
            TaskId::DlyGo => "Dly Go",
            TaskId::AntiGo => "Anti-Go",
            TaskId::RtAntiGo => "Anti-RT Go",
            TaskId::DlyAntiGo => "Anti-Dly Go",
            TaskId::Dm1 => "DM1",
            TaskId::Dm2 => "DM2",
            TaskId::CtxDm1 => "Ctx DM1",
            TaskId::CtxDm2 => "Ctx DM2",
            TaskId::MultStimDm => "MultStim DM",
            TaskId::DlyDm1 => "Dly DM1",
            TaskId::DlyDm2 => "Dly DM2",
            TaskId::CtxDlyDm1 => "Ctx Dly DM1",
            TaskId::CtxDlyDm2 => "Ctx Dly DM2",
            TaskId::MultStimDlyDm => "MultStim Dly DM",
            TaskId::Dms => "DMS",
            TaskId::Adms => "ADMS",
            TaskId::Dmc => "DMC",
            TaskId::Admc => "ADMC",
        }
    }

    pub fn group(self) -> TaskGroup {
        use TaskId::*;
        match self {
            Go | RtGo | DlyGo => TaskGroup::Go,
            AntiGo | RtAntiGo | DlyAntiGo => TaskGroup::AntiGo,
            Dm1 | Dm2 | CtxDm1 | CtxDm2 | MultStimDm => TaskGroup::Dm,
            DlyDm1 | DlyDm2 | CtxDlyDm1 | CtxDlyDm2 | MultStimDlyDm => TaskGroup::DlyDm,
            Dms | Adms | Dmc | Admc => TaskGroup::Matching,
        }
    }

    fn is_reaction_time(self) -> bool {
        matches!(self, TaskId::RtGo | TaskId::RtAntiGo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "direction")]
pub enum Action {
    Fixate,
    Respond(usize),
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Fixate => 0,
            Action::Respond(d) => 1 + d,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Fixate
        } else {
            Action::Respond(i - 1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    /// 0 or 1.
    pub location: usize,
    /// Direction index in `0..8`.
    pub direction: usize,
    pub strength: f64,
    pub on_ms: u32,
    pub off_ms: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub task: TaskId,
    pub stimuli: Vec<Stimulus>,
    /// `None` when the fixation cue stays on for the whole trial.
    pub fixation_off_ms: Option<u32>,
    /// Start of the response window; `None` if the trial requires
    /// fixation throughout.
    pub response_from_ms: Option<u32>,
    pub correct: Action,
    /// Half the strength difference of decision-making stimuli.
    pub coherence: Option<f64>,
    /// Mean strength γ̄ of decision-making stimuli (first location).
    pub mean_strength: Option<f64>,
    /// Delay between the two stimuli of delayed tasks.
    pub delay_ms: Option<u32>,
    pub is_match: Option<bool>,
}

pub fn direction_angle(d: usize) -> f64 {
    d as f64 * 2.0 * PI / N_DIRECTIONS as f64
}

/// Category of a direction for the category-matching tasks: four adjacent
/// directions per category.
pub fn category(d: usize) -> usize {
    d / (N_DIRECTIONS / 2)
}

fn opposite(d: usize) -> usize {
    (d + N_DIRECTIONS / 2) % N_DIRECTIONS
}

fn choose<T: Copy>(items: &[T], rng: &mut Rng) -> T {
    items[rng.random_range(0..items.len() as u64) as usize]
}

fn uniform_dir(rng: &mut Rng) -> usize {
    rng.random_range(0..N_DIRECTIONS as u64) as usize
}

fn go_family(task: TaskId, rng: &mut Rng) -> TrialSpec {
    let location = rng.random_range(0..2u64) as usize;
    let direction = uniform_dir(rng);
    let (on, off, fix_off) = match task {
        TaskId::Go | TaskId::AntiGo | TaskId::RtGo | TaskId::RtAntiGo => {
            let on = rng.random_range(20..=70u32) * STEP_MS;
            let fix_off = (!task.is_reaction_time()).then_some(1400);
            (on, TRIAL_MS, fix_off)
        }
        _ => (400, 700, Some(choose(&DLY_GO_FIX_OFF_MS, rng))),
    };
    let target = if task.group() == TaskGroup::AntiGo {
        opposite(direction)
    } else {
        direction
    };
    TrialSpec {
        task,
        stimuli: vec![Stimulus {
            location,
            direction,
            strength: 1.0,
            on_ms: on,
            off_ms: off,
        }],
        fixation_off_ms: fix_off,
        response_from_ms: Some(fix_off.unwrap_or(on)),
        correct: Action::Respond(target),
        coherence: None,
        mean_strength: None,
        delay_ms: None,
        is_match: None,
    }
}

/// Strengths `(γ̄ + c, γ̄ − c)` in random order, plus γ̄ and c.
fn dm_strengths(rng: &mut Rng) -> ([f64; 2], f64, f64) {
    let mean = rng.random_range(0.8..1.2);
    let c = choose(&DM_COHERENCES, rng);
    let s = if rng.random_bool(0.5) {
        [mean + c, mean - c]
    } else {
        [mean - c, mean + c]
    };
    (s, mean, c)
}

fn dm_family(task: TaskId, rng: &mut Rng) -> TrialSpec {
    use TaskId::*;
    let d1 = uniform_dir(rng);
    let d2 = (d1 + rng.random_range(2..=6u64) as usize) % N_DIRECTIONS;
    let delayed = task.group() == TaskGroup::DlyDm;
    let (windows, fix_off, delay) = if delayed {
        let gap = choose(&DELAYS_MS, rng);
        let second = 700 + gap;
        ([(400, 700), (second, second + 300)], second + 300, Some(gap))
    } else {
        let dur = choose(&DM_DURATIONS_MS, rng);
        ([(400, 400 + dur), (400, 400 + dur)], 400 + dur, None)
    };
    let dirs = [d1, d2];
    let stim = |loc: usize, k: usize, strength: f64| Stimulus {
        location: loc,
        direction: dirs[k],
        strength,
        on_ms: windows[k].0,
        off_ms: windows[k].1,
    };
    let (mut stimuli, correct, coherence, mean) = match task {
        Dm1 | Dm2 | DlyDm1 | DlyDm2 => {
            let loc = if matches!(task, Dm1 | DlyDm1) { 0 } else { 1 };
            let (s, mean, c) = dm_strengths(rng);
            let win = if s[0] > s[1] { d1 } else { d2 };
            (vec![stim(loc, 0, s[0]), stim(loc, 1, s[1])], win, c, mean)
        }
        CtxDm1 | CtxDm2 | CtxDlyDm1 | CtxDlyDm2 => {
            let (sa, mean_a, ca) = dm_strengths(rng);
            let (sb, mean_b, cb) = dm_strengths(rng);
            let relevant = if matches!(task, CtxDm1 | CtxDlyDm1) { 0 } else { 1 };
            let s = if relevant == 0 { sa } else { sb };
            let win = if s[0] > s[1] { d1 } else { d2 };
            let (c, mean) = if relevant == 0 { (ca, mean_a) } else { (cb, mean_b) };
            (
                vec![stim(0, 0, sa[0]), stim(0, 1, sa[1]), stim(1, 0, sb[0]), stim(1, 1, sb[1])],
                win,
                c,
                mean,
            )
        }
        _ => loop {
            let (sa, mean_a, ca) = dm_strengths(rng);
            let (sb, _, _) = dm_strengths(rng);
            let (m1, m2) = ((sa[0] + sb[0]) / 2.0, (sa[1] + sb[1]) / 2.0);
            if (m1 - m2).abs() < 1e-12 {
                continue;
            }
            let win = if m1 > m2 { d1 } else { d2 };
            break (
                vec![stim(0, 0, sa[0]), stim(0, 1, sa[1]), stim(1, 0, sb[0]), stim(1, 1, sb[1])],
                win,
                ca,
                mean_a,
            );
        },
    };
    stimuli.sort_by_key(|s| (s.on_ms, s.location));
    TrialSpec {
        task,
        stimuli,
        fixation_off_ms: Some(fix_off),
        response_from_ms: Some(fix_off),
        correct: Action::Respond(correct),
        coherence: Some(coherence),
        mean_strength: Some(mean),
        delay_ms: delay,
        is_match: None,
    }
}

fn matching_family(task: TaskId, rng: &mut Rng) -> TrialSpec {
    let location = rng.random_range(0..2u64) as usize;
    let gap = choose(&DELAYS_MS, rng);
    let second = 700 + gap;
    let fix_off = second + 300;
    let d1 = uniform_dir(rng);
    let is_match = rng.random_bool(0.5);
    let d2 = match (task, is_match) {
        (TaskId::Dms | TaskId::Adms, true) => d1,
        (TaskId::Dms | TaskId::Adms, false) => (d1 + rng.random_range(1..N_DIRECTIONS as u64) as usize) % N_DIRECTIONS,
        (_, m) => {
            let cat = if m { category(d1) } else { 1 - category(d1) };
            cat * (N_DIRECTIONS / 2) + rng.random_range(0..(N_DIRECTIONS / 2) as u64) as usize
        }
    };
    let correct = match (task, is_match) {
        (_, false) => Action::Fixate,
        (TaskId::Dms, true) => Action::Respond(d1),
        (TaskId::Adms, true) => Action::Respond(opposite(d1)),
        (TaskId::Dmc, true) => Action::Respond(d2),
        (_, true) => Action::Respond(opposite(d2)),
    };
    let stim = |direction, on_ms, off_ms| Stimulus {
        location,
        direction,
        strength: 1.0,
        on_ms,
        off_ms,
    };
    TrialSpec {
        task,
        stimuli: vec![stim(d1, 400, 700), stim(d2, second, fix_off)],
        fixation_off_ms: Some(fix_off),
        response_from_ms: is_match.then_some(fix_off),
        correct,
        coherence: None,
        mean_strength: None,
        delay_ms: Some(gap),
        is_match: Some(is_match),
    }
}

/// Draws one trial of `task`.
pub fn sample_trial(task: TaskId, rng: &mut Rng) -> TrialSpec {
    match task.group() {
        TaskGroup::Go | TaskGroup::AntiGo => go_family(task, rng),
        TaskGroup::Dm | TaskGroup::DlyDm => dm_family(task, rng),
        TaskGroup::Matching => matching_family(task, rng),
    }
}

/// Time-major tensors for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialTensors {
    /// `[T, n_in]`.
    pub inputs: Tensor,
    /// `[T, 9]`, one-hot per step.
    pub targets: Tensor,
    /// Per-step supervised loss weight.
    pub mask: Vec<f64>,
}

impl TrialTensors {
    pub fn target_action(&self, t: usize) -> usize {
        self.targets.row(t).iter().position(|&v| v == 1.0).expect("one-hot target")
    }
}

/// Response of motion unit `i` (preferred direction `2πi/32`) to a
/// stimulus of strength `gamma` in direction `dir`.
pub fn tuning(gamma: f64, dir: f64, unit: usize) -> f64 {
    let pref = 2.0 * PI * unit as f64 / N_MOTION_UNITS as f64;
    gamma * (TUNING_KAPPA * ((dir - pref).cos() - 1.0)).exp()
}

fn step_start_ms(t: usize) -> u32 {
    t as u32 * STEP_MS
}

/// Encodes `spec`; `noise` adds N(0, 0.1²) to the motion units.
pub fn encode_trial(spec: &TrialSpec, rule_cue: bool, noise: Option<&mut Rng>) -> TrialTensors {
    let n_in = if rule_cue { N_INPUTS_WITH_RULE } else { N_INPUTS };
    let mut inputs = Tensor::zeros(&[N_STEPS, n_in]);
    let mut targets = Tensor::zeros(&[N_STEPS, N_ACTIONS]);
    let mut mask = vec![1.0; N_STEPS];
    for m in mask.iter_mut().take(GRACE_STEPS) {
        *m = 0.0;
    }
    for t in 0..N_STEPS {
        let ms = step_start_ms(t);
        let row = inputs.row_mut(t);
        let fix_on = spec.fixation_off_ms.is_none_or(|off| ms < off);
        if fix_on {
            row[..N_FIXATION_UNITS].fill(1.0);
        }
        for s in &spec.stimuli {
            if (s.on_ms..s.off_ms).contains(&ms) {
                let base = N_FIXATION_UNITS + s.location * N_MOTION_UNITS;
                let dir = direction_angle(s.direction);
                for u in 0..N_MOTION_UNITS {
                    row[base + u] += tuning(s.strength, dir, u);
                }
            }
        }
        if rule_cue {
            row[N_INPUTS + spec.task.index()] = 1.0;
        }
        let respond = spec.response_from_ms.is_some_and(|r| ms >= r);
        let a = if respond { spec.correct.index() } else { 0 };
        targets.set2(t, a, 1.0);
    }
    if let Some(rng) = noise {
        let normal = Normal::new(0.0, INPUT_NOISE_SD).expect("valid sd");
        for t in 0..N_STEPS {
            for v in &mut inputs.row_mut(t)[N_FIXATION_UNITS..N_INPUTS] {
                *v += normal.sample(rng);
            }
        }
    }
    TrialTensors { inputs, targets, mask }
}

/// Population-vector estimate of the direction encoded by one location's
/// motion units.
pub fn population_vector(motion: &[f64]) -> f64 {
    let (mut x, mut y) = (0.0, 0.0);
    for (u, &r) in motion.iter().enumerate() {
        let pref = 2.0 * PI * u as f64 / motion.len() as f64;
        x += r * pref.cos();
        y += r * pref.sin();
    }
    y.atan2(x).rem_euclid(2.0 * PI)
}

/// A batch of trials laid out per time step for recurrent unrolling.
#[derive(Clone, Debug)]
pub struct TrialBatch {
    pub specs: Vec<TrialSpec>,
    /// `T` tensors of shape `[B, n_in]`.
    pub inputs: Vec<Tensor>,
    /// `T` tensors of shape `[B, 9]`.
    pub targets: Vec<Tensor>,
    /// `T` vectors of length `B`.
    pub masks: Vec<Vec<f64>>,
}

impl TrialBatch {
    pub fn batch_size(&self) -> usize {
        self.specs.len()
    }

    pub fn target_action(&self, t: usize, b: usize) -> usize {
        self.targets[t].row(b).iter().position(|&v| v == 1.0).expect("one-hot target")
    }
}

/// Samples and encodes `batch_size` trials of `task`.
pub fn sample_batch(task: TaskId, batch_size: usize, rule_cue: bool, rng: &mut Rng) -> TrialBatch {
    let mut specs = Vec::with_capacity(batch_size);
    let mut encoded = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let spec = sample_trial(task, rng);
        encoded.push(encode_trial(&spec, rule_cue, Some(rng)));
        specs.push(spec);
    }
    stack_trials(specs, &encoded)
}

pub fn stack_trials(specs: Vec<TrialSpec>, trials: &[TrialTensors]) -> TrialBatch {
    let b = trials.len();
    let n_in = trials.first().map_or(N_INPUTS, |t| t.inputs.cols());
    let mut inputs = Vec::with_capacity(N_STEPS);
    let mut targets = Vec::with_capacity(N_STEPS);
    let mut masks = Vec::with_capacity(N_STEPS);
    for t in 0..N_STEPS {
        let mut x = Tensor::zeros(&[b, n_in]);
        let mut y = Tensor::zeros(&[b, N_ACTIONS]);
        for (i, tr) in trials.iter().enumerate() {
            x.row_mut(i).copy_from_slice(tr.inputs.row(t));
            y.row_mut(i).copy_from_slice(tr.targets.row(t));
        }
        inputs.push(x);
        targets.push(y);
        masks.push(trials.iter().map(|tr| tr.mask[t]).collect());
    }
    TrialBatch {
        specs,
        inputs,
        targets,
        masks,
    }
}

/// Empirical distributions of the stochastic trial fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialStatistics {
    pub n: usize,
    pub stimulus_onsets_ms: BTreeMap<u32, usize>,
    pub fixation_off_ms: BTreeMap<u32, usize>,
    pub delays_ms: BTreeMap<u32, usize>,
    pub stimulus_durations_ms: BTreeMap<u32, usize>,
    /// Coherence values in thousandths.
    pub coherences_milli: BTreeMap<u32, usize>,
    /// Direction separations in units of π/4.
    pub separations: BTreeMap<usize, usize>,
    pub mean_strength_range: Option<(f64, f64)>,
    pub matches: usize,
    pub responses: BTreeMap<usize, usize>,
    pub all_times_on_grid: bool,
}

impl TrialStatistics {
    pub fn match_rate(&self) -> f64 {
        self.matches as f64 / self.n as f64
    }
}

pub fn trial_statistics(task: TaskId, n: usize, rng: &mut Rng) -> Result<TrialStatistics> {
    if n < 1000 {
        return Err(Error::invalid("trial_statistics", format!("need at least 1000 samples, got {n}")));
    }
    let mut st = TrialStatistics {
        n,
        all_times_on_grid: true,
        ..Default::default()
    };
    let on_grid = |ms: u32| ms % STEP_MS == 0 && ms <= TRIAL_MS;
    for _ in 0..n {
        let s = sample_trial(task, rng);
        for stim in &s.stimuli {
            *st.stimulus_onsets_ms.entry(stim.on_ms).or_default() += 1;
            *st.stimulus_durations_ms.entry(stim.off_ms - stim.on_ms).or_default() += 1;
            st.all_times_on_grid &= on_grid(stim.on_ms) && on_grid(stim.off_ms) && stim.on_ms < TRIAL_MS;
        }
        if let Some(off) = s.fixation_off_ms {
            *st.fixation_off_ms.entry(off).or_default() += 1;
            st.all_times_on_grid &= on_grid(off) && off < TRIAL_MS;
        }
        if let Some(d) = s.delay_ms {
            *st.delays_ms.entry(d).or_default() += 1;
        }
        if let Some(c) = s.coherence {
            *st.coherences_milli.entry((c * 1000.0).round() as u32).or_default() += 1;
        }
        if let Some(m) = s.mean_strength {
            let (lo, hi) = st.mean_strength_range.unwrap_or((m, m));
            st.mean_strength_range = Some((lo.min(m), hi.max(m)));
        }
        if matches!(task.group(), TaskGroup::Dm | TaskGroup::DlyDm) {
            let a = s.stimuli[0].direction;
            let b = s
                .stimuli
                .iter()
                .find(|x| x.direction != a)
                .map_or(a, |x| x.direction);
            let sep = (b + N_DIRECTIONS - a) % N_DIRECTIONS;
            *st.separations.entry(sep).or_default() += 1;
        }
        if s.is_match == Some(true) {
            st.matches += 1;
        }
        *st.responses.entry(s.correct.index()).or_default() += 1;
    }
    Ok(st)
}

const TRIAL_MAGIC: &[u8; 4] = b"FGTR";
const TRIAL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrialHeader {
    n_trials: usize,
    n_steps: usize,
    n_inputs: usize,
    n_actions: usize,
    specs: Vec<TrialSpec>,
}

/// Writes trials to `path` as
/// `b"FGTR" | u32 version | u64 header length | JSON header | f64 data`
/// (per trial: inputs, targets, mask; little-endian) and the specs alone
/// to a `.json` sidecar next to it.
pub fn write_trials(path: &Path, specs: &[TrialSpec], trials: &[TrialTensors]) -> Result<()> {
    if specs.len() != trials.len() {
        return Err(Error::invalid("trials", "specs and tensors differ in length"));
    }
    let n_inputs = trials.first().map_or(N_INPUTS, |t| t.inputs.cols());
    let header = TrialHeader {
        n_trials: trials.len(),
        n_steps: N_STEPS,
        n_inputs,
        n_actions: N_ACTIONS,
        specs: specs.to_vec(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(TRIAL_MAGIC);
    out.extend_from_slice(&TRIAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for tr in trials {
        for v in tr.inputs.data().iter().chain(tr.targets.data()).chain(&tr.mask) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_string_pretty(specs)?).map_err(|e| Error::io(&side, e))
}

pub fn read_trials(path: &Path) -> Result<(Vec<TrialSpec>, Vec<TrialTensors>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let err = |offset, message: String| Error::Parse {
        file: file.clone(),
        offset,
        message,
    };
    if bytes.len() < 16 || &bytes[..4] != TRIAL_MAGIC {
        return Err(err(0, "not a trial file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TRIAL_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err(8, "header length exceeds file".into()))?;
    let h: TrialHeader = serde_json::from_slice(&bytes[16..body]).map_err(|e| err(16, e.to_string()))?;
    let per = h.n_steps * (h.n_inputs + h.n_actions + 1);
    if bytes.len() - body != 8 * per * h.n_trials {
        return Err(err(body, "data size does not match header".into()));
    }
    let vals: Vec<f64> = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut trials = Vec::with_capacity(h.n_trials);
    for chunk in vals.chunks_exact(per) {
        let (x, rest) = chunk.split_at(h.n_steps * h.n_inputs);
        let (y, m) = rest.split_at(h.n_steps * h.n_actions);
        trials.push(TrialTensors {
            inputs: Tensor::new(vec![h.n_steps, h.n_inputs], x.to_vec())?,
            targets: Tensor::new(vec![h.n_steps, h.n_actions], y.to_vec())?,
            mask: m.to_vec(),
        });
    }
    Ok((h.specs, trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use forgetgate_autodiff::rng_from_seed;

    #[test]
    fn catalog_has_twenty_stable_ids() {
        assert_eq!(ALL_TASKS.len(), 20);
        for (i, t) in ALL_TASKS.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(TaskId::from_index(i).unwrap(), *t);
        }
        assert!(TaskId::from_index(20).is_err());
    }

    #[test]
    fn go_trial_timing() {
        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            let s = sample_trial(TaskId::Go, &mut rng);
            assert!((400..=1400).contains(&s.stimuli[0].on_ms));
            assert_eq!(s.fixation_off_ms, Some(1400));
            assert_eq!(s.correct, Action::Respond(s.stimuli[0].direction));
        }
    }

    #[test]
    fn rt_go_responds_from_onset() {
        let mut rng = rng_from_seed(2);
        let s = sample_trial(TaskId::RtGo, &mut rng);
        assert_eq!(s.fixation_off_ms, None);
        let tr = encode_trial(&s, false, None);
        let onset = (s.stimuli[0].on_ms / STEP_MS) as usize;
        assert_eq!(tr.target_action(onset - 1), 0);
        assert_eq!(tr.target_action(onset), s.correct.index());
        assert_eq!(tr.inputs.get2(N_STEPS - 1, 0), 1.0);
    }

    #[test]
    fn matching_examples() {
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let s = sample_trial(TaskId::Dms, &mut rng);
            if s.stimuli[0].direction == s.stimuli[1].direction {
                assert_eq!(s.is_match, Some(true));
                assert_eq!(s.correct, Action::Respond(s.stimuli[0].direction));
            }
            let a = sample_trial(TaskId::Admc, &mut rng);
            if a.is_match == Some(false) {
                assert_eq!(a.correct, Action::Fixate);
                let tr = encode_trial(&a, false, None);
                assert!((0..N_STEPS).all(|t| tr.target_action(t) == 0));
            }
        }
    }

    #[test]
    fn categories_flip_under_rotation() {
        for d in 0..8 {
            assert_ne!(category(d), category(opposite(d)));
        }
        assert_eq!((0..8).map(category).collect::<Vec<_>>(), [0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn zero_state_targets_start_with_fixation() {
        let mut rng = rng_from_seed(4);
        for task in ALL_TASKS {
            let s = sample_trial(task, &mut rng);
            let tr = encode_trial(&s, true, Some(&mut rng));
            assert_eq!(tr.target_action(0), 0, "{}", task.name());
            assert_eq!(tr.inputs.cols(), N_INPUTS_WITH_RULE);
            assert_eq!(tr.inputs.get2(0, N_INPUTS + task.index()), 1.0);
            assert_eq!(tr.mask[..GRACE_STEPS], [0.0; GRACE_STEPS]);
            assert!(tr.mask[GRACE_STEPS..].iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn noiseless_tuning_peaks_at_stimulus() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let s = sample_trial(TaskId::Go, &mut rng);
            let tr = encode_trial(&s, false, None);
            let base = N_FIXATION_UNITS + s.stimuli[0].location * N_MOTION_UNITS;
            let mut avg = vec![0.0; N_MOTION_UNITS];
            for t in 0..N_STEPS {
                for (a, &v) in avg.iter_mut().zip(&tr.inputs.row(t)[base..base + N_MOTION_UNITS]) {
                    *a += v;
                }
            }
            let peak = (0..N_MOTION_UNITS).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
            assert_eq!(peak, s.stimuli[0].direction * N_MOTION_UNITS / N_DIRECTIONS);
        }
    }

    #[test]
    fn trial_file_round_trip() {
        let mut rng = rng_from_seed(6);
        let specs: Vec<_> = (0..3).map(|_| sample_trial(TaskId::DlyDm1, &mut rng)).collect();
        let trials: Vec<_> = specs.iter().map(|s| encode_trial(s, false, None)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fgtr");
        write_trials(&p, &specs, &trials).unwrap();
        let (s2, t2) = read_trials(&p).unwrap();
        assert_eq!(s2, specs);
        assert_eq!(t2, trials);
        assert!(p.with_extension("json").exists());
    }
}
