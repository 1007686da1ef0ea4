//! Parameter importance (SI, EWC, reward-based SI) and the quadratic
//! stabilization penalty `c·Σ Ω (θ − θ_prev)²`.

use forgetgate_autodiff::{softmax, Graph, ParameterSet, Rng, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizerMethod {
    None,
    Si,
    Ewc,
    RlSi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizerConfig {
    pub method: StabilizerMethod,
    /// Penalty strength.
    pub c: f64,
    /// Damping for the SI family.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default = "default_fisher_batches")]
    pub fisher_batches: usize,
    #[serde(default = "default_fisher_batch_size")]
    pub fisher_batch_size: usize,
}

fn default_zeta() -> f64 {
    0.01
}
fn default_fisher_batches() -> usize {
    32
}
fn default_fisher_batch_size() -> usize {
    256
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl StabilizerConfig {
    pub fn none() -> Self {
        Self {
            method: StabilizerMethod::None,
            c: 0.0,
            zeta: default_zeta(),
            fisher_batches: default_fisher_batches(),
            fisher_batch_size: default_fisher_batch_size(),
        }
    }

    pub fn si(c: f64, zeta: f64) -> Self {
        Self {
            method: StabilizerMethod::Si,
            c,
            zeta,
            ..Self::none()
        }
    }

    pub fn ewc(c: f64) -> Self {
        Self {
            method: StabilizerMethod::Ewc,
            c,
            ..Self::none()
        }
    }

    pub fn rl_si(c: f64, zeta: f64) -> Self {
        Self {
            method: StabilizerMethod::RlSi,
            c,
            zeta,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) {
            return Err(Error::invalid("stabilizer", format!("c must be ≥ 0, got {}", self.c)));
        }
        if matches!(self.method, StabilizerMethod::Si | StabilizerMethod::RlSi) && !(self.zeta > 0.0) {
            return Err(Error::invalid("stabilizer", format!("zeta must be > 0, got {}", self.zeta)));
        }
        if self.method == StabilizerMethod::Ewc && (self.fisher_batches == 0 || self.fisher_batch_size == 0) {
            return Err(Error::invalid("stabilizer", "EWC needs at least one Fisher sample"));
        }
        Ok(())
    }
}

fn check_pair(a: &[Tensor], b: &[Tensor], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::invalid(
            "parameter shapes",
            format!("{op}: stores do not match ({} vs {} tensors)", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Accumulated importance and the anchor values it pulls towards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStore {
    pub method: StabilizerMethod,
    pub names: Vec<String>,
    /// Ω, summed over completed tasks.
    pub omega: Vec<Tensor>,
    /// θ_prev, the parameters at the end of the previous task.
    pub anchor: Vec<Tensor>,
    pub tasks_completed: usize,
}

impl ImportanceStore {
    pub fn new(params: &ParameterSet, method: StabilizerMethod) -> Self {
        Self {
            method,
            names: params.names().to_vec(),
            omega: params.zeros_like(),
            anchor: params.tensors().to_vec(),
            tasks_completed: 0,
        }
    }

    /// `c·Σ Ω (θ − θ_prev)²`.
    pub fn penalty(&self, params: &ParameterSet, c: f64) -> Result<f64> {
        check_pair(params.tensors(), &self.omega, "penalty")?;
        let mut total = 0.0;
        for ((p, o), a) in params.tensors().iter().zip(&self.omega).zip(&self.anchor) {
            for ((&p, &o), &a) in p.data().iter().zip(o.data()).zip(a.data()) {
                total += o * (p - a) * (p - a);
            }
        }
        Ok(c * total)
    }

    /// Adds `2cΩ(θ − θ_prev)` to `grads`.
    pub fn add_penalty_grad(&self, params: &ParameterSet, c: f64, grads: &mut [Tensor]) -> Result<()> {
        check_pair(params.tensors(), &self.omega, "penalty")?;
        check_pair(params.tensors(), grads, "penalty")?;
        if c == 0.0 {
            return Ok(());
        }
        for (((g, p), o), a) in grads.iter_mut().zip(params.tensors()).zip(&self.omega).zip(&self.anchor) {
            for (((g, &p), &o), &a) in g.data_mut().iter_mut().zip(p.data()).zip(o.data()).zip(a.data()) {
                *g += 2.0 * c * o * (p - a);
            }
        }
        Ok(())
    }

    pub fn penalty_grad(&self, params: &ParameterSet, c: f64) -> Result<Vec<Tensor>> {
        let mut g = params.zeros_like();
        self.add_penalty_grad(params, c, &mut g)?;
        Ok(g)
    }

    /// Ω += Ω^k and θ_prev ← θ.
    pub fn end_of_task(&mut self, task_importance: &[Tensor], params: &ParameterSet) -> Result<()> {
        check_pair(&self.omega, task_importance, "end_of_task")?;
        check_pair(&self.omega, params.tensors(), "end_of_task")?;
        if task_importance.iter().any(|t| t.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite())) {
            return Err(Error::invalid("importance", "per-task importance must be finite and ≥ 0"));
        }
        if self.method != StabilizerMethod::None {
            for (o, k) in self.omega.iter_mut().zip(task_importance) {
                o.axpy(1.0, k)?;
            }
        }
        self.anchor = params.tensors().to_vec();
        self.tasks_completed += 1;
        Ok(())
    }

    pub fn total_importance(&self) -> f64 {
        self.omega.iter().map(Tensor::sum).sum()
    }
}

/// In-flight path-integral accumulators for the current task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiAccumulator {
    /// ω.
    pub omega: Vec<Tensor>,
    /// Σ Δθ over the task.
    pub displacement: Vec<Tensor>,
    /// ω̄ = Σ |Δθ|·|ΔR| (reward-based variant only).
    pub omega_bar: Vec<Tensor>,
    /// Mean reward of the previous batch.
    pub last_reward: Option<f64>,
    pub updates: usize,
}

impl SiAccumulator {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            omega: params.zeros_like(),
            displacement: params.zeros_like(),
            omega_bar: params.zeros_like(),
            last_reward: None,
            updates: 0,
        }
    }

    pub fn reset(&mut self) {
        for t in self
            .omega
            .iter_mut()
            .chain(self.displacement.iter_mut())
            .chain(self.omega_bar.iter_mut())
        {
            t.data_mut().fill(0.0);
        }
        self.last_reward = None;
        self.updates = 0;
    }

    /// Sets R(t−1) for the first reward-based update of a task.
    pub fn set_reward_baseline(&mut self, r: f64) {
        self.last_reward = Some(r);
    }

    /// ω += Δθ ⊙ (−∂L_k/∂θ) with Δθ = after − before.
    pub fn si_batch_update(&mut self, before: &ParameterSet, after: &ParameterSet, task_grads: &[Tensor]) -> Result<()> {
        check_pair(before.tensors(), after.tensors(), "si_batch_update")?;
        check_pair(before.tensors(), task_grads, "si_batch_update")?;
        check_pair(before.tensors(), &self.omega, "si_batch_update")?;
        for i in 0..self.omega.len() {
            let b = before.get(i).data();
            let a = after.get(i).data();
            let g = task_grads[i].data();
            let disp = self.displacement[i].data_mut();
            let om = self.omega[i].data_mut();
            for j in 0..b.len() {
                let d = a[j] - b[j];
                om[j] -= d * g[j];
                disp[j] += d;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Ω^k = max(0, ω / (Δθ² + ζ)); resets the accumulator.
    pub fn si_finalize(&mut self, zeta: f64) -> Vec<Tensor> {
        let out = self
            .omega
            .iter()
            .zip(&self.displacement)
            .map(|(o, d)| {
                o.zip_map(d, "si_finalize", |w, dt| (w / (dt * dt + zeta)).max(0.0))
                    .expect("accumulator shapes agree")
            })
            .collect();
        self.reset();
        out
    }

    /// ω += Δθ·ΔR and ω̄ += |Δθ|·|ΔR| with ΔR = R(t) − R(t−1). The first
    /// update of a task without a baseline only records R(t).
    pub fn rl_si_batch_update(&mut self, before: &ParameterSet, after: &ParameterSet, mean_reward: f64) -> Result<()> {
        check_pair(before.tensors(), after.tensors(), "rl_si_batch_update")?;
        check_pair(before.tensors(), &self.omega, "rl_si_batch_update")?;
        let delta_r = self.last_reward.map_or(0.0, |prev| mean_reward - prev);
        self.last_reward = Some(mean_reward);
        self.updates += 1;
        if delta_r == 0.0 {
            return Ok(());
        }
        for i in 0..self.omega.len() {
            let b = before.get(i).data();
            let a = after.get(i).data();
            let disp = self.displacement[i].data_mut();
            let om = self.omega[i].data_mut();
            let ob = self.omega_bar[i].data_mut();
            for j in 0..b.len() {
                let d = a[j] - b[j];
                om[j] += d * delta_r;
                ob[j] += d.abs() * delta_r.abs();
                disp[j] += d;
            }
        }
        Ok(())
    }

    /// Ω^k = |ω / (ω̄ + ζ)|; resets the accumulator.
    pub fn rl_si_finalize(&mut self, zeta: f64) -> Vec<Tensor> {
        let out = self
            .omega
            .iter()
            .zip(&self.omega_bar)
            .map(|(o, b)| {
                o.zip_map(b, "rl_si_finalize", |w, wb| (w / (wb + zeta)).abs())
                    .expect("accumulator shapes agree")
            })
            .collect();
        self.reset();
        out
    }
}

/// A classifier whose output distribution the Fisher estimate samples from.
pub trait LogitModel {
    fn parameters(&self) -> &ParameterSet;

    /// Evaluation-mode logits for `inputs`, built on `graph` from the
    /// registered parameter leaves `params`.
    fn logits(&self, graph: &mut Graph, params: &[Var], inputs: &Tensor) -> Result<Var>;

    /// Outputs that are inactive (probability 0) for the current task.
    fn class_mask(&self) -> Option<Vec<bool>> {
        None
    }
}

/// Diagonal Fisher: running mean of squared log-likelihood gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherEstimate {
    pub mean_sq_grad: Vec<Tensor>,
    pub samples: usize,
}

/// Diagonal Fisher at labels sampled from the model itself: for each of
/// `cfg.fisher_batches × cfg.fisher_batch_size` rows drawn from `inputs`,
/// draw y ~ p_θ(·|x) and accumulate (∂ log p_θ(y|x)/∂θ)².
pub fn ewc_fisher<M: LogitModel>(model: &M, inputs: &Tensor, cfg: &StabilizerConfig, rng: &mut Rng) -> Result<FisherEstimate> {
    let n = inputs.rows();
    if n == 0 || inputs.is_empty() {
        return Err(Error::invalid("Fisher", "empty dataset"));
    }
    let total = cfg.fisher_batches * cfg.fisher_batch_size;
    let rows: Vec<usize> = (0..total).map(|_| rng.random_range(0..n as u64) as usize).collect();
    fisher_from_rows(model, inputs, rows, rng)
}

/// Fisher estimate over an explicit sequence of input rows.
pub fn fisher_from_rows<M: LogitModel>(
    model: &M,
    inputs: &Tensor,
    rows: impl IntoIterator<Item = usize>,
    rng: &mut Rng,
) -> Result<FisherEstimate> {
    let params = model.parameters();
    let mut acc = params.zeros_like();
    let mask = model.class_mask();
    let d = inputs.cols();
    let mut samples = 0;
    for r in rows {
        let x = Tensor::new(vec![1, d], inputs.row(r).to_vec())?;
        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let logits = model.logits(&mut g, &vars, &x)?;
        let row = g.value(logits).row(0).to_vec();
        let masked: Vec<f64> = match &mask {
            Some(m) => row.iter().zip(m).map(|(&v, &on)| if on { v } else { f64::NEG_INFINITY }).collect(),
            None => row,
        };
        let probs = softmax(&masked);
        let y = sample_categorical(&probs, rng);
        let mut target = Tensor::zeros(&[1, probs.len()]);
        target.set2(0, y, 1.0);
        let loss = g.cross_entropy(logits, target, Some(vec![1.0]), mask.clone())?;
        let mut grads = g.backward(loss)?;
        for ((a, &v), p) in acc.iter_mut().zip(&vars).zip(params.tensors()) {
            let gv = grads.take_or_zeros(v, p.shape());
            for (a, &x) in a.data_mut().iter_mut().zip(gv.data()) {
                *a += x * x;
            }
        }
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::invalid("Fisher", "no samples drawn"));
    }
    for a in &mut acc {
        for v in a.data_mut() {
            *v /= samples as f64;
        }
    }
    Ok(FisherEstimate {
        mean_sq_grad: acc,
        samples,
    })
}

pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn penalty_single_parameter() {
        let p = scalar_params(1.5);
        let mut store = ImportanceStore::new(&scalar_params(1.0), StabilizerMethod::Si);
        store.omega[0] = Tensor::vector(vec![2.0]);
        assert!((store.penalty(&p, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!((store.penalty_grad(&p, 0.1).unwrap()[0].data()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn penalty_zero_at_anchor() {
        let p = scalar_params(0.3);
        let mut store = ImportanceStore::new(&p, StabilizerMethod::Si);
        store.omega[0] = Tensor::vector(vec![5.0]);
        assert_eq!(store.penalty(&p, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn si_three_steps() {
        let mut acc = SiAccumulator::new(&scalar_params(0.0));
        for k in 0..3 {
            let before = scalar_params(0.1 * k as f64);
            let after = scalar_params(0.1 * (k + 1) as f64);
            acc.si_batch_update(&before, &after, &[Tensor::vector(vec![-0.2])]).unwrap();
        }
        assert!((acc.omega[0].data()[0] - 0.06).abs() < 1e-12);
        assert!((acc.displacement[0].data()[0] - 0.3).abs() < 1e-12);
        let omega = acc.si_finalize(0.01);
        assert!((omega[0].data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(acc.omega[0].data()[0], 0.0);
    }

    #[test]
    fn si_zero_gradient_leaves_omega() {
        let mut acc = SiAccumulator::new(&scalar_params(0.0));
        acc.si_batch_update(&scalar_params(0.0), &scalar_params(0.5), &[Tensor::vector(vec![0.0])])
            .unwrap();
        assert_eq!(acc.omega[0].data()[0], 0.0);
    }

    #[test]
    fn si_finalize_clamps_negative() {
        let mut acc = SiAccumulator::new(&scalar_params(0.0));
        acc.omega[0] = Tensor::vector(vec![-0.5]);
        assert_eq!(acc.si_finalize(0.01)[0].data()[0], 0.0);
    }

    #[test]
    fn rl_si_two_batches() {
        let mut acc = SiAccumulator::new(&scalar_params(0.0));
        acc.set_reward_baseline(0.0);
        acc.rl_si_batch_update(&scalar_params(0.0), &scalar_params(0.1), 0.2).unwrap();
        acc.rl_si_batch_update(&scalar_params(0.1), &scalar_params(0.0), 0.4).unwrap();
        assert!(acc.omega[0].data()[0].abs() < 1e-12);
        assert!((acc.omega_bar[0].data()[0] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn rl_si_finalize_value() {
        let mut acc = SiAccumulator::new(&scalar_params(0.0));
        acc.omega[0] = Tensor::vector(vec![0.04]);
        acc.omega_bar[0] = Tensor::vector(vec![0.04]);
        assert!((acc.rl_si_finalize(0.01)[0].data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn end_of_task_sums_and_moves_anchor() {
        let p0 = scalar_params(0.0);
        let mut store = ImportanceStore::new(&p0, StabilizerMethod::Si);
        store.end_of_task(&[Tensor::vector(vec![0.6])], &scalar_params(1.0)).unwrap();
        store.end_of_task(&[Tensor::vector(vec![0.4])], &scalar_params(2.0)).unwrap();
        assert!((store.omega[0].data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(store.anchor[0].data()[0], 2.0);
        assert_eq!(store.penalty(&scalar_params(2.0), 3.0).unwrap(), 0.0);

        let mut none = ImportanceStore::new(&p0, StabilizerMethod::None);
        none.end_of_task(&[Tensor::vector(vec![0.6])], &p0).unwrap();
        assert_eq!(none.omega[0].data()[0], 0.0);
    }

    #[test]
    fn end_of_task_rejects_mismatch() {
        let mut store = ImportanceStore::new(&scalar_params(0.0), StabilizerMethod::Si);
        assert!(store
            .end_of_task(&[Tensor::vector(vec![0.1, 0.2])], &scalar_params(0.0))
            .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(StabilizerConfig::si(-1.0, 0.01).validate().is_err());
        assert!(StabilizerConfig::si(0.1, 0.0).validate().is_err());
        assert!(StabilizerConfig::si(0.1, 0.01).validate().is_ok());
        assert!(StabilizerConfig::none().validate().is_ok());
    }
}
