//! The base learner, the coordinatewise LSTM optimizer, and the task
//! attention network. Every network keeps its parameters as one flat vector
//! so meta-parameters can be handled uniformly by the outer optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, AdError, Graph, Tensor, Var};
use crate::tasks::Dataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite meta-information for task {0}")]
    NonFiniteMetaInfo(usize),
}

type Result<T> = std::result::Result<T, ModelError>;

// ---------------------------------------------------------------------------
// Base learner

/// Fully connected relu network with a softmax cross-entropy head.
///
/// `sizes` lists layer widths from input to output, e.g. `[32, 64, 64, 5]`.
/// Parameters are laid out layer by layer as the row-major (in × out)
/// weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseLearner {
    sizes: Vec<usize>,
}

impl BaseLearner {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ModelError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// He-normal weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            out.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            out.extend(std::iter::repeat_n(0.0, w[1]));
        }
        out
    }

    /// Split a flat parameter vector into per-layer (weights, bias).
    pub fn unflatten(&self, params: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if params.len() != self.param_count() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        Ok(self
            .sizes
            .windows(2)
            .map(|w| {
                let weights = params[offset..offset + w[0] * w[1]].to_vec();
                offset += w[0] * w[1];
                let bias = params[offset..offset + w[1]].to_vec();
                offset += w[1];
                (weights, bias)
            })
            .collect())
    }

    pub fn flatten(layers: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect()
    }

    /// Logits (rows × classes) for `inputs` (rows × input_dim).
    pub fn forward<'g>(&self, params: Var<'g>, inputs: Var<'g>) -> Result<Var<'g>> {
        if params.len() != self.param_count() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "input of shape {shape:?} for a network expecting width {}",
                self.input_dim()
            )));
        }
        let flat = params.reshape(&[self.param_count()])?;
        let mut h = inputs;
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (layer, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = flat
                .slice(0, offset, offset + fan_in * fan_out)?
                .reshape(&[fan_in, fan_out])?;
            offset += fan_in * fan_out;
            let bias = flat.slice(0, offset, offset + fan_out)?.reshape(&[1, fan_out])?;
            offset += fan_out;
            h = h.matmul(weights)?.add(bias)?;
            if layer != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn loss<'g>(&self, params: Var<'g>, data: &Dataset) -> Result<Var<'g>> {
        Ok(self.evaluate(params, data)?.0)
    }

    /// Mean cross-entropy (differentiable) and argmax accuracy (a plain number).
    pub fn evaluate<'g>(&self, params: Var<'g>, data: &Dataset) -> Result<(Var<'g>, f64)> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let inputs = params.graph().constant(data.inputs.clone());
        let logits = self.forward(params, inputs)?;
        let loss = logits.cross_entropy(&data.labels)?;
        Ok((loss, accuracy(&logits.value(), &data.labels)))
    }
}

/// Fraction of rows whose largest logit is at the label. Ties go to the
/// lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (_, c) = logits.view();
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

// ---------------------------------------------------------------------------
// Learned optimizer

/// Scaling exponent of the optimizer input preprocessing.
pub const PREPROCESS_P: f64 = 10.0;

/// Map `x` to `(ln|x| / p, sign x)` when `|x| ≥ e^{-p}`, else `(-1, e^p x)`.
pub fn preprocess(x: f64) -> (f64, f64) {
    let p = PREPROCESS_P;
    if x.abs() >= (-p).exp() {
        (x.abs().ln() / p, x.signum())
    } else {
        (-1.0, p.exp() * x)
    }
}

/// Per-coordinate features `[loss₁, loss₂, grad₁, grad₂]`, one row per
/// coordinate (rows × 4, row-major).
pub fn preprocess_optimizer_inputs(loss: f64, grad: &[f64]) -> Vec<f64> {
    let (l1, l2) = preprocess(loss);
    let mut out = Vec::with_capacity(grad.len() * 4);
    for &g in grad {
        let (g1, g2) = preprocess(g);
        out.extend_from_slice(&[l1, l2, g1, g2]);
    }
    out
}

/// How the cell-update gates are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    Learned,
    /// Constant gates; reduces the cell update to `f·c − i·∇`.
    Fixed {
        forget: f64,
        input: f64,
    },
}

/// Coordinatewise two-layer LSTM optimizer.
///
/// Layer one is a standard LSTM over the preprocessed (loss, gradient)
/// features of each coordinate. Layer two computes a forget gate `f` and an
/// input gate `i` from `[h₁, c_{t−1}, f_{t−1}, i_{t−1}]` and updates the
/// cell, which *is* the base learner's parameter vector:
/// `c_t = f ⊙ c_{t−1} − i ⊙ ∇`. All weights are shared across coordinates.
///
/// Weight layout: `W₁ ((4+H) × 4H)`, `b₁ (4H)`, `W₂ ((H+3) × 2)`, `b₂ (2)`.
/// Layer-one gate blocks are ordered input, forget, output, candidate;
/// layer-two columns are forget, input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmOptimizer {
    hidden: usize,
    gates: GateMode,
}

pub const FORGET_BIAS_INIT: f64 = 5.0;
pub const INPUT_BIAS_INIT: f64 = -5.0;

const FEATURES: usize = 4;

/// Recurrent state of one adaptation run.
#[derive(Debug, Clone, Copy)]
pub struct LstmState<'g> {
    pub h1: Var<'g>,
    pub c1: Var<'g>,
    pub forget: Var<'g>,
    pub input: Var<'g>,
    /// The base learner parameters as a (P × 1) column.
    pub cell: Var<'g>,
}

impl LstmState<'_> {
    pub fn params(&self) -> Vec<f64> {
        self.cell.to_vec()
    }
}

impl LstmOptimizer {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            gates: GateMode::Learned,
        }
    }

    pub fn with_gates(mut self, gates: GateMode) -> Self {
        self.gates = gates;
        self
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn gates(&self) -> GateMode {
        self.gates
    }

    fn layer1_len(&self) -> usize {
        (FEATURES + self.hidden) * 4 * self.hidden + 4 * self.hidden
    }

    pub fn weight_count(&self) -> usize {
        self.layer1_len() + (self.hidden + 3) * 2 + 2
    }

    /// Small uniform weights, zero layer-one biases, and gate biases that
    /// start the cell update near the identity (f ≈ 1, i ≈ 0).
    pub fn init_weights<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let h = self.hidden;
        let mut w = Vec::with_capacity(self.weight_count());
        w.extend((0..(FEATURES + h) * 4 * h).map(|_| rng.gen_range(-0.1..0.1)));
        w.extend(std::iter::repeat_n(0.0, 4 * h));
        w.extend((0..(h + 3) * 2).map(|_| rng.gen_range(-0.01..0.01)));
        w.extend_from_slice(&[FORGET_BIAS_INIT, INPUT_BIAS_INIT]);
        w
    }

    /// Fresh state whose cell is `initial` (length P, any shape).
    pub fn initial_state<'g>(&self, initial: Var<'g>) -> Result<LstmState<'g>> {
        let g = initial.graph();
        let p = initial.len();
        let zeros = |cols: usize| g.constant(Tensor::zeros(&[p, cols]));
        Ok(LstmState {
            h1: zeros(self.hidden),
            c1: zeros(self.hidden),
            forget: zeros(1),
            input: zeros(1),
            cell: initial.reshape(&[p, 1])?,
        })
    }

    /// One optimizer step. `loss` and `grad` are data: nothing is
    /// differentiated through them.
    pub fn step<'g>(&self, weights: Var<'g>, state: &LstmState<'g>, loss: f64, grad: &[f64]) -> Result<LstmState<'g>> {
        let g = weights.graph();
        let p = state.cell.len();
        if grad.len() != p {
            return Err(ModelError::Shape(format!(
                "gradient of length {} for {p} coordinates",
                grad.len()
            )));
        }
        if weights.len() != self.weight_count() {
            return Err(ModelError::Shape(format!(
                "expected {} optimizer weights, got {}",
                self.weight_count(),
                weights.len()
            )));
        }
        let h = self.hidden;
        let features = g.constant(Tensor::matrix(p, FEATURES, preprocess_optimizer_inputs(loss, grad))?);
        let grad_col = g.constant(Tensor::matrix(p, 1, grad.to_vec())?);

        // Layer one: standard LSTM.
        let flat = weights.reshape(&[self.weight_count()])?;
        let w1_len = (FEATURES + h) * 4 * h;
        let w1 = flat.slice(0, 0, w1_len)?.reshape(&[FEATURES + h, 4 * h])?;
        let b1 = flat.slice(0, w1_len, w1_len + 4 * h)?.reshape(&[1, 4 * h])?;
        let z = concat(&[features, state.h1], 1)?.matmul(w1)?.add(b1)?;
        let gate_i = z.slice(1, 0, h)?.sigmoid()?;
        let gate_f = z.slice(1, h, 2 * h)?.sigmoid()?;
        let gate_o = z.slice(1, 2 * h, 3 * h)?.sigmoid()?;
        let candidate = z.slice(1, 3 * h, 4 * h)?.tanh()?;
        let c1 = gate_f.mul(state.c1)?.add(gate_i.mul(candidate)?)?;
        let h1 = gate_o.mul(c1.tanh()?)?;

        // Layer two: the parameter cell.
        let (forget, input) = match self.gates {
            GateMode::Learned => {
                let off = self.layer1_len();
                let w2 = flat.slice(0, off, off + (h + 3) * 2)?.reshape(&[h + 3, 2])?;
                let b2 = flat
                    .slice(0, off + (h + 3) * 2, self.weight_count())?
                    .reshape(&[1, 2])?;
                let z2 = concat(&[h1, state.cell, state.forget, state.input], 1)?
                    .matmul(w2)?
                    .add(b2)?
                    .sigmoid()?;
                (z2.slice(1, 0, 1)?, z2.slice(1, 1, 2)?)
            }
            GateMode::Fixed { forget, input } => (
                g.constant(Tensor::full(&[p, 1], forget)),
                g.constant(Tensor::full(&[p, 1], input)),
            ),
        };
        let cell = forget.mul(state.cell)?.sub(input.mul(grad_col)?)?;
        Ok(LstmState {
            h1,
            c1,
            forget,
            input,
            cell,
        })
    }
}

// ---------------------------------------------------------------------------
// Task attention

/// Per-task meta-information fed to the attention network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaInfo {
    /// ‖∇_φ L*(φ^T)‖₂ over all base parameters.
    pub grad_norm: f64,
    /// L*^T: query loss after adaptation.
    pub query_loss: f64,
    /// A*^T: query accuracy after adaptation.
    pub query_accuracy: f64,
    /// L*^T / L*⁰.
    pub loss_ratio: f64,
}

impl MetaInfo {
    pub fn features(&self) -> [f64; 4] {
        [self.grad_norm, self.query_loss, self.query_accuracy, self.loss_ratio]
    }

    pub const FEATURE_NAMES: [&'static str; 4] = ["grad_norm", "query_loss", "query_accuracy", "loss_ratio"];
}

/// Feature-wise z-scores across the batch (rows = tasks).
pub fn standardize(infos: &[MetaInfo]) -> Result<Vec<f64>> {
    if let Some(bad) = infos.iter().position(|m| m.features().iter().any(|v| !v.is_finite())) {
        return Err(ModelError::NonFiniteMetaInfo(bad));
    }
    let b = infos.len();
    let mut out = vec![0.0; b * 4];
    for k in 0..4 {
        let mut column: Vec<f64> = infos.iter().map(|m| m.features()[k]).collect();
        let mean = crate::autodiff::order_free_sum(&mut column.clone()) / b as f64;
        let mut sq: Vec<f64> = column.iter_mut().map(|v| (*v - mean) * (*v - mean)).collect();
        let std = (crate::autodiff::order_free_sum(&mut sq) / b as f64).sqrt();
        for (i, m) in infos.iter().enumerate() {
            out[i * 4 + k] = (m.features()[k] - mean) / (std + 1e-8);
        }
    }
    Ok(out)
}

/// Maps a batch of meta-information tuples to softmax weights over tasks.
///
/// Each task's standardized 4-vector goes through a pointwise (1×1)
/// convolution to `width` channels, two fully connected layers of `width`
/// units, and a linear score; a softmax over the batch turns scores into
/// weights. All layers are shared across tasks.
///
/// Weight layout: conv `4 × W`, `W`; fc₁ `W × W`, `W`; fc₂ `W × W`, `W`;
/// score `W × 1`, `1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionNet {
    batch: usize,
    width: usize,
}

impl AttentionNet {
    pub const DEFAULT_WIDTH: usize = 32;

    pub fn new(batch: usize) -> Self {
        Self::with_width(batch, Self::DEFAULT_WIDTH)
    }

    pub fn with_width(batch: usize, width: usize) -> Self {
        Self { batch, width }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn layers(&self) -> [(usize, usize); 4] {
        let w = self.width;
        [(4, w), (w, w), (w, w), (w, 1)]
    }

    pub fn weight_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn init_weights<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for (fan_in, fan_out) in self.layers() {
            let bound = (6.0 / fan_in as f64).sqrt();
            out.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    /// Attention weights `w` (length B, on the simplex), differentiable in `delta`.
    pub fn forward<'g>(&self, delta: Var<'g>, infos: &[MetaInfo]) -> Result<Var<'g>> {
        if infos.len() != self.batch {
            return Err(ModelError::Shape(format!(
                "attention over {} tasks, network built for {}",
                infos.len(),
                self.batch
            )));
        }
        if delta.len() != self.weight_count() {
            return Err(ModelError::Shape(format!(
                "expected {} attention weights, got {}",
                self.weight_count(),
                delta.len()
            )));
        }
        let g = delta.graph();
        let x = g.constant(Tensor::matrix(self.batch, 4, standardize(infos)?)?);
        let flat = delta.reshape(&[self.weight_count()])?;
        let mut h = x;
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in self.layers().into_iter().enumerate() {
            let w = flat
                .slice(0, offset, offset + fan_in * fan_out)?
                .reshape(&[fan_in, fan_out])?;
            offset += fan_in * fan_out;
            let b = flat.slice(0, offset, offset + fan_out)?.reshape(&[1, fan_out])?;
            offset += fan_out;
            h = h.matmul(w)?.add(b)?;
            if layer < 3 {
                h = h.relu()?;
            }
        }
        Ok(h.reshape(&[self.batch])?.softmax()?)
    }

    /// Plain attention weights.
    pub fn weights(&self, delta: &[f64], infos: &[MetaInfo]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let d = g.constant(Tensor::vector(delta.to_vec()));
        Ok(self.forward(d, infos)?.to_vec())
    }
}
