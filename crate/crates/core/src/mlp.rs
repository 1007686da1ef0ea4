//! Feed-forward classifier with optional task-context input and gating.

use forgetgate_autodiff::{dropout_mask, softmax, stream, Graph, ParameterSet, Rng, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{apply_gate, context_vector, GateMask, GatingScheme};
use crate::stabilization::LogitModel;

const INIT_TAG: u64 = 0x696e_6974;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMode {
    /// Every item of the test split.
    FullTest,
    /// `n_batches` random batches of `batch_size` test items.
    Batches { n_batches: usize, batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_outputs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub input_dropout: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eval")]
    pub eval: EvalMode,
}

fn default_dropout() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_eval() -> EvalMode {
    EvalMode::FullTest
}

impl MlpConfig {
    /// 784 → 400 → 400 → 10.
    pub fn desk() -> Self {
        Self {
            input_dim: 784,
            hidden: vec![400, 400],
            n_outputs: 10,
            dropout: default_dropout(),
            input_dropout: 0.0,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            eval: default_eval(),
        }
    }

    /// 784 → 2000 → 2000 → 10.
    pub fn full_scale() -> Self {
        Self {
            hidden: vec![2000, 2000],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("mlp config", m));
        if self.hidden.is_empty() {
            return bad("at least one hidden layer is required".into());
        }
        if self.input_dim == 0 || self.n_outputs == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        for (name, r) in [("dropout", self.dropout), ("input_dropout", self.input_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1), got {r}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let EvalMode::Batches { n_batches, batch_size } = self.eval {
            if n_batches == 0 || batch_size == 0 {
                return bad("evaluation batches must be non-empty".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Indices of one hidden layer's tensors in the parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: usize,
    pub bias: usize,
    pub context: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub gating: GatingScheme,
    pub params: ParameterSet,
    pub layers: Vec<LayerParams>,
    pub output_weight: usize,
    pub output_bias: usize,
    masks: Vec<GateMask>,
}

fn he_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("sizes agree")
}

impl Mlp {
    /// He-uniform weights and zero biases, drawn from `seed`.
    pub fn new(config: MlpConfig, gating: GatingScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        gating.validate()?;
        if gating.layer_sizes != config.hidden {
            return Err(Error::invalid(
                "gating",
                format!("gate layers {:?} do not match hidden {:?}", gating.layer_sizes, config.hidden),
            ));
        }
        let mut rng = stream(seed, &[INIT_TAG]);
        let mut params = ParameterSet::new();
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim;
        for (l, &w) in config.hidden.iter().enumerate() {
            let weight = params.push(format!("hidden{l}.weight"), he_uniform(fan_in, w, fan_in, &mut rng));
            let bias = params.push(format!("hidden{l}.bias"), Tensor::zeros(&[w]));
            let context = gating.context.then(|| {
                params.push(
                    format!("hidden{l}.context"),
                    he_uniform(gating.n_tasks, w, gating.n_tasks, &mut rng),
                )
            });
            layers.push(LayerParams { weight, bias, context });
            fan_in = w;
        }
        let output_weight = params.push("output.weight", he_uniform(fan_in, config.n_outputs, fan_in, &mut rng));
        let output_bias = params.push("output.bias", Tensor::zeros(&[config.n_outputs]));
        let masks = gating.masks()?;
        Ok(Self {
            config,
            gating,
            params,
            layers,
            output_weight,
            output_bias,
            masks,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.gating.n_tasks
    }

    pub fn mask(&self, task: usize) -> Result<&GateMask> {
        self.masks.get(task).ok_or_else(|| {
            Error::invalid("task index", format!("{task} out of range for {} tasks", self.masks.len()))
        })
    }

    /// Logits for `inputs` under task `task`. `vars` are the registered
    /// leaves of `self.params`; `rng` drives dropout and is only used in
    /// training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        inputs: &Tensor,
        task: usize,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let mask = self.mask(task)?;
        if inputs.cols() != self.config.input_dim || inputs.shape().len() != 2 {
            return Err(Error::invalid(
                "inputs",
                format!("shape {:?} for input_dim {}", inputs.shape(), self.config.input_dim),
            ));
        }
        let b = inputs.rows();
        let mut dropout = |g: &mut Graph, x: Var, rate: f64, width: usize| -> Result<Var> {
            match (&mut rng, mode) {
                (Some(r), Mode::Train) if rate > 0.0 => Ok(g.mul_const(x, dropout_mask(&[b, width], rate, r)?)?),
                (None, Mode::Train) if rate > 0.0 => {
                    Err(Error::invalid("forward", "training mode with dropout needs an rng"))
                }
                _ => Ok(x),
            }
        };
        let mut h = g.constant(inputs.clone());
        h = dropout(g, h, self.config.input_dropout, self.config.input_dim)?;
        let ctx = if self.gating.context {
            Some(g.constant(context_vector(task, self.gating.n_tasks)?.batch(b)))
        } else {
            None
        };
        for (l, lp) in self.layers.iter().enumerate() {
            let z = g.matmul(h, vars[lp.weight])?;
            let mut z = g.add_bias(z, vars[lp.bias])?;
            if let (Some(c), Some(ci)) = (ctx, lp.context) {
                let proj = g.matmul(c, vars[ci])?;
                z = g.add(z, proj)?;
            }
            let a = g.relu(z)?;
            let a = dropout(g, a, self.config.dropout, self.config.hidden[l])?;
            h = apply_gate(g, a, &mask.layers[l])?;
        }
        let out = g.matmul(h, vars[self.output_weight])?;
        Ok(g.add_bias(out, vars[self.output_bias])?)
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn logits(&self, inputs: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g);
        let out = self.forward(&mut g, &vars, inputs, task, Mode::Eval, None)?;
        Ok(g.value(out).clone())
    }

    /// Last-hidden-layer activations (after gating) in evaluation mode.
    pub fn last_hidden(&self, inputs: &Tensor, task: usize) -> Result<Tensor> {
        let mask = self.mask(task)?;
        let ctx = if self.gating.context {
            Some(context_vector(task, self.gating.n_tasks)?.batch(inputs.rows()))
        } else {
            None
        };
        let mut h = inputs.clone();
        for (l, lp) in self.layers.iter().enumerate() {
            let mut z = h.matmul(self.params.get(lp.weight))?;
            let bias = self.params.get(lp.bias).data();
            if let (Some(c), Some(ci)) = (&ctx, lp.context) {
                z = z.add(&c.matmul(self.params.get(ci))?)?;
            }
            for r in 0..z.rows() {
                for ((v, &bb), &m) in z.row_mut(r).iter_mut().zip(bias).zip(&mask.layers[l]) {
                    *v = (*v + bb).max(0.0) * m;
                }
            }
            h = z;
        }
        Ok(h)
    }
}

/// Softmax over the active outputs; inactive outputs get exactly 0.
pub fn masked_softmax(row: &[f64], class_mask: Option<&[bool]>) -> Vec<f64> {
    match class_mask {
        None => softmax(row),
        Some(m) => {
            let masked: Vec<f64> = row
                .iter()
                .zip(m)
                .map(|(&v, &on)| if on { v } else { f64::NEG_INFINITY })
                .collect();
            softmax(&masked)
        }
    }
}

/// Index of the largest active logit (first on ties).
pub fn masked_argmax(row: &[f64], class_mask: Option<&[bool]>) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if class_mask.is_some_and(|m| !m[j]) {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = j;
        }
    }
    best
}

/// The model evaluated under one task, for Fisher estimation.
pub struct TaskView<'a> {
    pub model: &'a Mlp,
    pub task: usize,
    pub class_mask: Option<Vec<bool>>,
}

impl LogitModel for TaskView<'_> {
    fn parameters(&self) -> &ParameterSet {
        &self.model.params
    }

    fn logits(&self, graph: &mut Graph, params: &[Var], inputs: &Tensor) -> Result<Var> {
        self.model.forward(graph, params, inputs, self.task, Mode::Eval, None)
    }

    fn class_mask(&self) -> Option<Vec<bool>> {
        self.class_mask.clone()
    }
}
