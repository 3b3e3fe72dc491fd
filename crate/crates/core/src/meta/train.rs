use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, order_free_sum, Graph, Tensor, Var};
use crate::metrics::{ci95, theil_term_var, MetricsError};
use crate::models::{AttentionNet, MetaInfo};

use super::{Adam, Algorithm, Episode, MetaError, MetaModel, Result, TrainConfig};

/// Per-task products of one adaptation at the current θ.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    /// ∇_θ L*(φ^T), second order.
    pub meta_gradient: Vec<f64>,
    /// ∇_θ L*(φ⁰), when requested.
    pub initial_gradient: Option<Vec<f64>>,
    pub info: MetaInfo,
    pub initial_query_loss: f64,
    pub trajectory: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub gradient: Vec<f64>,
    pub outcomes: Vec<TaskOutcome>,
}

/// What one outer iteration saw, for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// L*^T per task.
    pub query_losses: Vec<f64>,
    /// L*⁰ per task.
    pub initial_losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub infos: Vec<MetaInfo>,
    /// Attention weights, for attended steps.
    pub weights: Option<Vec<f64>>,
}

impl StepRecord {
    fn from_outcomes(outcomes: &[TaskOutcome], weights: Option<Vec<f64>>) -> Self {
        Self {
            query_losses: outcomes.iter().map(|o| o.info.query_loss).collect(),
            initial_losses: outcomes.iter().map(|o| o.initial_query_loss).collect(),
            accuracies: outcomes.iter().map(|o| o.info.query_accuracy).collect(),
            infos: outcomes.iter().map(|o| o.info).collect(),
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// 95% halfwidth, 1.96·s/√n.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub tasks: usize,
}

/// Applies `f` to every episode, in parallel when enabled. Results keep
/// episode order, and the first failing episode (by index) is reported.
fn map_tasks<E, T, F>(episodes: &[E], f: F) -> Result<Vec<T>>
where
    E: Episode,
    T: Send,
    F: Fn(&E) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let results: Vec<Result<T>> = {
        use rayon::prelude::*;
        episodes.par_iter().map(&f).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<T>> = episodes.iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| match e {
                MetaError::Divergence(msg) => MetaError::Divergence(format!("task {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// `Σᵢ wᵢ vᵢ` coordinatewise (unit weights when `weights` is `None`),
/// summed in an order that does not depend on the order of the vectors.
pub fn weighted_sum<V: AsRef<[f64]>>(vectors: &[V], weights: Option<&[f64]>) -> Vec<f64> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let n = first.as_ref().len();
    let mut terms = vec![0.0; vectors.len()];
    (0..n)
        .map(|k| {
            for (i, v) in vectors.iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[i]);
                terms[i] = w * v.as_ref()[k];
            }
            order_free_sum(&mut terms)
        })
        .collect()
}

/// Adapts to one task in its own graph and differentiates the post-adaptation
/// query loss with respect to θ.
pub fn task_outcome<E: Episode + ?Sized>(
    model: &MetaModel,
    episode: &E,
    steps: usize,
    with_initial: bool,
) -> Result<TaskOutcome> {
    let g = Graph::new();
    let theta = g.param(Tensor::vector(model.theta.clone()));
    let initial_gradient = if with_initial {
        let offset = if model.algorithm.uses_lstm() {
            model.theta.len() - model.base_params
        } else {
            0
        };
        let init = theta.slice(0, offset, offset + model.base_params)?;
        let q0 = episode.query_eval(init)?.0;
        Some(gradient(q0, &[theta], false)?.wrt(theta).to_vec())
    } else {
        None
    };
    let result = model.adapt(theta, episode, steps, true)?;
    let meta_gradient = gradient(result.query_loss, &[theta], false)?.wrt(theta).to_vec();
    Ok(TaskOutcome {
        meta_gradient,
        initial_gradient,
        info: result.meta_info(),
        initial_query_loss: result.initial_query_loss,
        trajectory: result.trajectory,
    })
}

/// `Σᵢ wᵢ ∇_θ L*ᵢ(φᵢ^T)` over the batch.
pub fn meta_gradient<E: Episode>(
    model: &MetaModel,
    episodes: &[E],
    steps: usize,
    weights: Option<&[f64]>,
) -> Result<BatchGradient> {
    if episodes.is_empty() {
        return Err(MetaError::Config("empty task batch".into()));
    }
    if let Some(w) = weights {
        if w.len() != episodes.len() {
            return Err(MetaError::Config(format!(
                "{} weights for {} tasks",
                w.len(),
                episodes.len()
            )));
        }
    }
    let outcomes = map_tasks(episodes, |e| task_outcome(model, e, steps, false))?;
    let grads: Vec<&[f64]> = outcomes.iter().map(|o| o.meta_gradient.as_slice()).collect();
    Ok(BatchGradient {
        gradient: weighted_sum(&grads, weights),
        outcomes,
    })
}

fn require(model: &MetaModel, ok: bool, op: &str) -> Result<()> {
    model.validate()?;
    if !ok {
        return Err(MetaError::Config(format!("{op} does not apply to {}", model.algorithm)));
    }
    Ok(())
}

fn batch_update<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
) -> Result<StepRecord> {
    let batch = meta_gradient(model, episodes, steps, None)?;
    adam.step(&mut model.theta, &batch.gradient);
    Ok(StepRecord::from_outcomes(&batch.outcomes, None))
}

/// One Adam step on `∇_θ Σᵢ L*ᵢ(φᵢ^T)` with second-order inner gradients.
pub fn meta_update_maml<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
) -> Result<StepRecord> {
    require(
        model,
        matches!(model.algorithm, Algorithm::Maml | Algorithm::Taml),
        "meta_update_maml",
    )?;
    batch_update(model, adam, episodes, steps)
}

/// Joint step on the initialization and the per-parameter rates.
pub fn meta_update_metasgd<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
) -> Result<StepRecord> {
    require(model, model.algorithm == Algorithm::MetaSgd, "meta_update_metasgd")?;
    batch_update(model, adam, episodes, steps)
}

/// MAML objective plus `λ·Theil(L*₁(θ), …, L*_B(θ))` on pre-adaptation
/// query losses.
pub fn taml_gradient<E: Episode>(
    model: &MetaModel,
    episodes: &[E],
    steps: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<TaskOutcome>)> {
    if episodes.is_empty() {
        return Err(MetaError::Config("empty task batch".into()));
    }
    let outcomes = map_tasks(episodes, |e| task_outcome(model, e, steps, true))?;
    let losses: Vec<f64> = outcomes.iter().map(|o| o.initial_query_loss).collect();
    if let Some(&bad) = losses.iter().find(|&&l| !(l > 0.0)) {
        return Err(MetricsError::NonPositiveLoss(bad).into());
    }
    // ∂Theil/∂Lᵢ, then the chain rule through each ∇_θ L*ᵢ(θ).
    let g = Graph::new();
    let l = g.param(Tensor::vector(losses));
    let coeffs = gradient(theil_term_var(l)?, &[l], false)?.wrt(l).to_vec();
    let weights: Vec<f64> = coeffs.iter().map(|c| lambda * c).collect();
    let post: Vec<&[f64]> = outcomes.iter().map(|o| o.meta_gradient.as_slice()).collect();
    let pre: Vec<&[f64]> = outcomes
        .iter()
        .map(|o| o.initial_gradient.as_deref().expect("requested"))
        .collect();
    let maml = weighted_sum(&post, None);
    let theil = weighted_sum(&pre, Some(&weights));
    let total = maml.iter().zip(&theil).map(|(a, b)| a + b).collect();
    Ok((total, outcomes))
}

pub fn meta_update_taml<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
    lambda: f64,
) -> Result<StepRecord> {
    require(model, model.algorithm == Algorithm::Taml, "meta_update_taml")?;
    let (grad, outcomes) = taml_gradient(model, episodes, steps, lambda)?;
    adam.step(&mut model.theta, &grad);
    Ok(StepRecord::from_outcomes(&outcomes, None))
}

/// One Adam step per task, in order; each task adapts with the weights
/// left by the previous one.
pub fn meta_update_metalstm_sequential<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
) -> Result<StepRecord> {
    require(model, model.algorithm.uses_lstm(), "meta_update_metalstm_sequential")?;
    if episodes.is_empty() {
        return Err(MetaError::Config("empty task list".into()));
    }
    let mut outcomes = Vec::with_capacity(episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        let outcome = task_outcome(model, e, steps, false).map_err(|err| match err {
            MetaError::Divergence(msg) => MetaError::Divergence(format!("task {i}: {msg}")),
            other => other,
        })?;
        adam.step(&mut model.theta, &outcome.meta_gradient);
        outcomes.push(outcome);
    }
    Ok(StepRecord::from_outcomes(&outcomes, None))
}

/// One Adam step on the summed batch meta-gradient.
pub fn meta_update_metalstm_batch<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    steps: usize,
) -> Result<StepRecord> {
    require(model, model.algorithm.uses_lstm(), "meta_update_metalstm_batch")?;
    batch_update(model, adam, episodes, steps)
}

/// The unattended outer iteration for `model.algorithm`.
pub fn meta_step<E: Episode>(
    model: &mut MetaModel,
    adam: &mut Adam,
    episodes: &[E],
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    match model.algorithm {
        Algorithm::Maml => meta_update_maml(model, adam, episodes, cfg.steps),
        Algorithm::MetaSgd => meta_update_metasgd(model, adam, episodes, cfg.steps),
        Algorithm::Taml => meta_update_taml(model, adam, episodes, cfg.steps, cfg.taml_lambda),
        Algorithm::MetaLstm => meta_update_metalstm_sequential(model, adam, episodes, cfg.steps),
        Algorithm::MetaLstmPlusPlus => meta_update_metalstm_batch(model, adam, episodes, cfg.steps),
    }
}

/// Gradient with respect to δ of the fresh-batch objective.
///
/// θ' depends on the attention weights through `θ' = θ − β Σᵢ wᵢ gᵢ` with the
/// per-task meta-gradients `gᵢ` held constant, so with
/// `u = Σⱼ ∇_{θ'} L*ⱼ(φⱼ^T)` the chain rule gives
/// `∇_δ = Σᵢ (−β ⟨gᵢ, u⟩) ∇_δ wᵢ`.
pub fn attention_gradient<V: AsRef<[f64]>>(
    attention: &AttentionNet,
    delta: &[f64],
    infos: &[MetaInfo],
    task_gradients: &[V],
    fresh_gradient: &[f64],
    beta: f64,
) -> Result<Vec<f64>> {
    if task_gradients.len() != infos.len() {
        return Err(MetaError::Config(format!(
            "{} task gradients for {} tasks",
            task_gradients.len(),
            infos.len()
        )));
    }
    let coeffs: Vec<f64> = task_gradients
        .iter()
        .map(|g| -beta * g.as_ref().iter().zip(fresh_gradient).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let g = Graph::new();
    let d = g.param(Tensor::vector(delta.to_vec()));
    let w = attention.forward(d, infos)?;
    let objective = w.mul(g.constant(Tensor::vector(coeffs)))?.sum()?;
    Ok(gradient(objective, &[d], false)?.wrt(d).to_vec())
}

/// One task-attended iteration.
///
/// 1. Adapt to `batch`, collect meta-information, and compute `w`.
/// 2. Step θ along `Σᵢ wᵢ ∇_θ L*ᵢ` with `w` treated as numbers.
/// 3. Adapt to `fresh` from the new θ and step δ along the gradient of the
///    fresh-batch loss, routed through `w` by [`attention_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn task_attended_step<E: Episode>(
    model: &mut MetaModel,
    theta_adam: &mut Adam,
    attention: &AttentionNet,
    delta: &mut [f64],
    delta_adam: &mut Adam,
    batch: &[E],
    fresh: &[E],
    steps: usize,
) -> Result<StepRecord> {
    require(model, model.algorithm.supports_attention(), "task_attended_step")?;
    if batch.len() != attention.batch() {
        return Err(MetaError::Config(format!(
            "attention built for {} tasks, batch has {}",
            attention.batch(),
            batch.len()
        )));
    }

    let phase1 = map_tasks(batch, |e| task_outcome(model, e, steps, false))?;
    let infos: Vec<MetaInfo> = phase1.iter().map(|o| o.info).collect();
    let w = attention.weights(delta, &infos)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(MetaError::Divergence(format!("non-finite attention weights {w:?}")));
    }

    let grads: Vec<&[f64]> = phase1.iter().map(|o| o.meta_gradient.as_slice()).collect();
    let direction = weighted_sum(&grads, Some(&w));
    theta_adam.step(&mut model.theta, &direction);

    let fresh_grad = meta_gradient(model, fresh, steps, None)?.gradient;
    let delta_grad = attention_gradient(attention, delta, &infos, &grads, &fresh_grad, theta_adam.lr)?;
    delta_adam.step(delta, &delta_grad);

    Ok(StepRecord::from_outcomes(&phase1, Some(w)))
}

/// The weighted objective `Σᵢ stop(wᵢ) L*ᵢ(φᵢ^T)` built in one graph, with
/// `w` from the attention net. Returns its gradients with respect to θ and δ.
pub fn joint_weighted_gradient<E: Episode>(
    model: &MetaModel,
    attention: &AttentionNet,
    delta: &[f64],
    infos: &[MetaInfo],
    episodes: &[E],
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Graph::new();
    let theta = g.param(Tensor::vector(model.theta.clone()));
    let d = g.param(Tensor::vector(delta.to_vec()));
    let w = attention.forward(d, infos)?.detach();
    let mut objective: Option<Var<'_>> = None;
    for (i, e) in episodes.iter().enumerate() {
        let loss = model.adapt(theta, e, steps, true)?.query_loss;
        let term = w.slice(0, i, i + 1)?.reshape(&[])?.mul(loss)?;
        objective = Some(match objective {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let objective = objective.ok_or_else(|| MetaError::Config("empty task batch".into()))?;
    let grads = gradient(objective, &[theta, d], false)?;
    Ok((grads.wrt(theta).to_vec(), grads.wrt(d).to_vec()))
}

/// Adapts to each episode's support set and scores its query set.
pub fn meta_test<E: Episode>(model: &MetaModel, episodes: &[E], steps: usize) -> Result<EvalReport> {
    model.validate()?;
    if episodes.is_empty() {
        return Err(MetaError::Config("meta-test needs at least one task".into()));
    }
    let accuracies = map_tasks(episodes, |e| {
        let g = Graph::new();
        let theta = g.param(Tensor::vector(model.theta.clone()));
        Ok(model.adapt(theta, e, steps, false)?.query_accuracy)
    })?;
    let (mean_accuracy, ci95) = ci95(&accuracies)?;
    Ok(EvalReport {
        mean_accuracy,
        ci95,
        tasks: accuracies.len(),
        accuracies,
    })
}
