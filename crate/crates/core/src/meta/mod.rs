//! Meta-training: gradient-based adaptation, the five outer-loop
//! algorithms, the task-attended training step, and meta-testing.
//!
//! Every meta-model keeps its meta-parameters as one flat vector θ:
//!
//! | algorithm           | θ layout                      |
//! |---------------------|-------------------------------|
//! | MAML, TAML          | base initialization           |
//! | MetaSGD             | base initialization, rates α  |
//! | MetaLSTM, MetaLSTM++| optimizer weights, cell c₀    |
//!
//! Per-task meta-gradients are computed in isolated graphs, optionally in
//! parallel, and merged with an order-independent sum, so sequential and
//! parallel execution agree bit for bit.

mod adam;
mod adapt;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Var};
use crate::metrics::MetricsError;
use crate::models::{BaseLearner, LstmOptimizer, ModelError};
use crate::tasks::{QuadraticTask, Task, TaskError};

pub use adam::Adam;
pub use adapt::{adapt_gd, adapt_lstm, compute_meta_info, AdaptResult, Rate};
pub use train::{
    attention_gradient, joint_weighted_gradient, meta_gradient, meta_step, meta_test, meta_update_maml,
    meta_update_metalstm_batch, meta_update_metalstm_sequential, meta_update_metasgd, meta_update_taml, taml_gradient,
    task_attended_step, task_outcome, weighted_sum, BatchGradient, EvalReport, StepRecord, TaskOutcome,
};

/// A loss above this aborts the step.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl MetaError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, MetaError::Divergence(_))
    }
}

impl From<ModelError> for MetaError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(AdError::NonFinite { op }) => {
                MetaError::Divergence(format!("non-finite value produced by {op}"))
            }
            other => MetaError::Model(other),
        }
    }
}

impl From<AdError> for MetaError {
    fn from(e: AdError) -> Self {
        ModelError::from(e).into()
    }
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// A support/query pair that can be evaluated at any base-parameter vector.
pub trait Episode: Sync {
    fn support_loss<'g>(&self, params: Var<'g>) -> std::result::Result<Var<'g>, ModelError>;

    /// Query loss and accuracy.
    fn query_eval<'g>(&self, params: Var<'g>) -> std::result::Result<(Var<'g>, f64), ModelError>;
}

/// A classification task seen through a base learner.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierEpisode<'a> {
    pub learner: &'a BaseLearner,
    pub task: &'a Task,
}

impl Episode for ClassifierEpisode<'_> {
    fn support_loss<'g>(&self, params: Var<'g>) -> std::result::Result<Var<'g>, ModelError> {
        self.learner.loss(params, &self.task.support)
    }

    fn query_eval<'g>(&self, params: Var<'g>) -> std::result::Result<(Var<'g>, f64), ModelError> {
        self.learner.evaluate(params, &self.task.query)
    }
}

/// The surface is both support and query; accuracy is reported as 0.
impl Episode for QuadraticTask {
    fn support_loss<'g>(&self, params: Var<'g>) -> std::result::Result<Var<'g>, ModelError> {
        Ok(self.loss(params)?)
    }

    fn query_eval<'g>(&self, params: Var<'g>) -> std::result::Result<(Var<'g>, f64), ModelError> {
        Ok((self.loss(params)?, 0.0))
    }
}

/// An episode given by two loss closures; accuracy is reported as 0.
pub struct FnEpisode<S, Q> {
    support: S,
    query: Q,
}

impl<S, Q> FnEpisode<S, Q>
where
    S: for<'g> Fn(Var<'g>) -> std::result::Result<Var<'g>, AdError> + Sync,
    Q: for<'g> Fn(Var<'g>) -> std::result::Result<Var<'g>, AdError> + Sync,
{
    pub fn new(support: S, query: Q) -> Self {
        Self { support, query }
    }
}

impl<S, Q> Episode for FnEpisode<S, Q>
where
    S: for<'g> Fn(Var<'g>) -> std::result::Result<Var<'g>, AdError> + Sync,
    Q: for<'g> Fn(Var<'g>) -> std::result::Result<Var<'g>, AdError> + Sync,
{
    fn support_loss<'g>(&self, params: Var<'g>) -> std::result::Result<Var<'g>, ModelError> {
        Ok((self.support)(params)?)
    }

    fn query_eval<'g>(&self, params: Var<'g>) -> std::result::Result<(Var<'g>, f64), ModelError> {
        Ok(((self.query)(params)?, 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "maml")]
    Maml,
    #[serde(rename = "metasgd")]
    MetaSgd,
    #[serde(rename = "taml")]
    Taml,
    #[serde(rename = "metalstm")]
    MetaLstm,
    #[serde(rename = "metalstm++")]
    MetaLstmPlusPlus,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Maml,
        Algorithm::MetaSgd,
        Algorithm::Taml,
        Algorithm::MetaLstm,
        Algorithm::MetaLstmPlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Maml => "maml",
            Algorithm::MetaSgd => "metasgd",
            Algorithm::Taml => "taml",
            Algorithm::MetaLstm => "metalstm",
            Algorithm::MetaLstmPlusPlus => "metalstm++",
        }
    }

    pub fn uses_lstm(self) -> bool {
        matches!(self, Algorithm::MetaLstm | Algorithm::MetaLstmPlusPlus)
    }

    /// Whether one batched meta-update exists, which the attended step needs.
    pub fn supports_attention(self) -> bool {
        matches!(self, Algorithm::Maml | Algorithm::MetaSgd | Algorithm::MetaLstmPlusPlus)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| MetaError::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Outer-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// B: tasks per meta-batch.
    pub batch_size: usize,
    /// T: adaptation steps.
    pub steps: usize,
    pub iterations: u64,
    /// β: Adam rate for θ.
    pub meta_lr: f64,
    /// γ: Adam rate for the attention weights.
    pub attention_lr: f64,
    /// λ: weight of the Theil term.
    pub taml_lambda: f64,
    /// Inner-loop rate α (initial value for MetaSGD).
    pub inner_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 5,
            iterations: 2000,
            meta_lr: 1e-3,
            attention_lr: 1e-3,
            taml_lambda: 0.1,
            inner_lr: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MetaError::Config("batch_size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(MetaError::Config("steps must be at least 1".into()));
        }
        for (name, v) in [
            ("meta_lr", self.meta_lr),
            ("attention_lr", self.attention_lr),
            ("inner_lr", self.inner_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MetaError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.taml_lambda >= 0.0 && self.taml_lambda.is_finite()) {
            return Err(MetaError::Config(format!(
                "taml_lambda must be non-negative, got {}",
                self.taml_lambda
            )));
        }
        Ok(())
    }
}

/// The meta-knowledge of one algorithm, stored as a flat vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub algorithm: Algorithm,
    /// P: number of base-learner parameters.
    pub base_params: usize,
    /// Scalar inner rate for MAML and TAML.
    pub inner_rate: f64,
    pub optimizer: Option<LstmOptimizer>,
    pub theta: Vec<f64>,
}

impl MetaModel {
    /// θ at initialization. MetaSGD rates start at `inner_rate`; LSTM
    /// variants start their cell at `base_init`.
    pub fn new<R: rand::Rng>(
        algorithm: Algorithm,
        base_init: Vec<f64>,
        inner_rate: f64,
        lstm_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let p = base_init.len();
        let (optimizer, theta) = match algorithm {
            Algorithm::Maml | Algorithm::Taml => (None, base_init),
            Algorithm::MetaSgd => {
                let mut theta = base_init;
                theta.extend(std::iter::repeat_n(inner_rate, p));
                (None, theta)
            }
            Algorithm::MetaLstm | Algorithm::MetaLstmPlusPlus => {
                let opt = LstmOptimizer::new(lstm_hidden);
                let mut theta = opt.init_weights(rng);
                theta.extend(base_init);
                (Some(opt), theta)
            }
        };
        Self {
            algorithm,
            base_params: p,
            inner_rate,
            optimizer,
            theta,
        }
    }

    fn lstm_weight_count(&self) -> usize {
        self.optimizer.as_ref().map_or(0, LstmOptimizer::weight_count)
    }

    /// φ⁰: the base parameters every adaptation starts from.
    pub fn initial_params(&self) -> &[f64] {
        match self.algorithm {
            Algorithm::MetaLstm | Algorithm::MetaLstmPlusPlus => &self.theta[self.lstm_weight_count()..],
            _ => &self.theta[..self.base_params],
        }
    }

    /// MetaSGD's per-parameter rates.
    pub fn rates(&self) -> Option<&[f64]> {
        (self.algorithm == Algorithm::MetaSgd).then(|| &self.theta[self.base_params..])
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.algorithm {
            Algorithm::Maml | Algorithm::Taml => self.base_params,
            Algorithm::MetaSgd => 2 * self.base_params,
            Algorithm::MetaLstm | Algorithm::MetaLstmPlusPlus => {
                if self.optimizer.is_none() {
                    return Err(MetaError::Config(format!("{} needs an LSTM optimizer", self.algorithm)));
                }
                self.lstm_weight_count() + self.base_params
            }
        };
        if self.theta.len() != expected {
            return Err(MetaError::Config(format!(
                "{} expects {expected} meta-parameters, found {}",
                self.algorithm,
                self.theta.len()
            )));
        }
        Ok(())
    }

    /// Adapts from the meta-parameters `theta` (a graph variable holding
    /// this model's θ). `second_order` keeps φ^T differentiable through the
    /// inner gradients of the gradient-descent variants.
    pub fn adapt<'g, E: Episode + ?Sized>(
        &self,
        theta: Var<'g>,
        episode: &E,
        steps: usize,
        second_order: bool,
    ) -> Result<AdaptResult<'g>> {
        let p = self.base_params;
        match self.algorithm {
            Algorithm::Maml | Algorithm::Taml => {
                adapt_gd(episode, theta, Rate::Scalar(self.inner_rate), steps, second_order)
            }
            Algorithm::MetaSgd => {
                let init = theta.slice(0, 0, p)?;
                let rates = theta.slice(0, p, 2 * p)?;
                adapt_gd(episode, init, Rate::PerParam(rates), steps, second_order)
            }
            Algorithm::MetaLstm | Algorithm::MetaLstmPlusPlus => {
                let opt = self
                    .optimizer
                    .as_ref()
                    .ok_or_else(|| MetaError::Config("missing LSTM optimizer".into()))?;
                let n = opt.weight_count();
                let weights = theta.slice(0, 0, n)?;
                let c0 = theta.slice(0, n, n + p)?;
                adapt_lstm(opt, weights, c0, episode, steps)
            }
        }
    }
}
