use crate::autodiff::{gradient, Graph, Tensor, Var};
use crate::models::{LstmOptimizer, MetaInfo};

use super::{Episode, MetaError, Result, DIVERGENCE_LOSS};

/// Inner-loop step size.
#[derive(Debug, Clone, Copy)]
pub enum Rate<'g> {
    Scalar(f64),
    /// One rate per parameter, as a graph variable so it can be learned.
    PerParam(Var<'g>),
}

/// Outcome of adapting to one task.
#[derive(Debug, Clone)]
pub struct AdaptResult<'g> {
    /// φ^T, still connected to the meta-parameters.
    pub adapted: Var<'g>,
    /// L*⁰: query loss at φ⁰.
    pub initial_query_loss: f64,
    /// L*^T, differentiable.
    pub query_loss: Var<'g>,
    /// A*^T.
    pub query_accuracy: f64,
    /// ‖∇_φ L*(φ^T)‖₂.
    pub grad_norm: f64,
    /// φ⁰, …, φ^T.
    pub trajectory: Vec<Vec<f64>>,
}

impl AdaptResult<'_> {
    pub fn meta_info(&self) -> MetaInfo {
        let loss = self.query_loss.item();
        MetaInfo {
            grad_norm: self.grad_norm,
            query_loss: loss,
            query_accuracy: self.query_accuracy,
            loss_ratio: loss / self.initial_query_loss.max(1e-12),
        }
    }
}

pub fn compute_meta_info(results: &[AdaptResult<'_>]) -> Vec<MetaInfo> {
    results.iter().map(AdaptResult::meta_info).collect()
}

pub(crate) fn check_loss(stage: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(MetaError::Divergence(format!("{stage} loss {loss}")));
    }
    Ok(())
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(MetaError::Config("adaptation needs at least one step".into()));
    }
    Ok(())
}

/// `T` steps of `φ ← φ − rate ⊙ ∇L(φ)` on the support set from `init`.
///
/// With `second_order`, the inner gradients stay in the graph so φ^T can be
/// differentiated twice through them; otherwise they are treated as
/// constants (the first-order approximation).
pub fn adapt_gd<'g, E: Episode + ?Sized>(
    episode: &E,
    init: Var<'g>,
    rate: Rate<'g>,
    steps: usize,
    second_order: bool,
) -> Result<AdaptResult<'g>> {
    check_steps(steps)?;
    let initial_query_loss = episode.query_eval(init.detach())?.0.item();
    check_loss("initial query", initial_query_loss)?;
    let mut phi = init;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(phi.to_vec());
    for step in 0..steps {
        let loss = episode.support_loss(phi)?;
        check_loss(&format!("support (step {step})"), loss.item())?;
        let grad = gradient(loss, &[phi], second_order)?.wrt(phi);
        let delta = match rate {
            Rate::Scalar(a) => grad.scale(a)?,
            Rate::PerParam(a) => grad.mul(a.reshape(&grad.shape())?)?,
        };
        phi = phi.sub(delta)?;
        trajectory.push(phi.to_vec());
    }
    finish(episode, phi, initial_query_loss, trajectory)
}

/// `T` steps of the learned optimizer from the cell `c0`. Loss and gradient
/// inputs are computed on detached copies of the parameters.
pub fn adapt_lstm<'g, E: Episode + ?Sized>(
    optimizer: &LstmOptimizer,
    weights: Var<'g>,
    c0: Var<'g>,
    episode: &E,
    steps: usize,
) -> Result<AdaptResult<'g>> {
    check_steps(steps)?;
    let p = c0.len();
    let initial_query_loss = episode.query_eval(c0.detach())?.0.item();
    check_loss("initial query", initial_query_loss)?;
    let mut state = optimizer.initial_state(c0)?;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(c0.to_vec());
    for step in 0..steps {
        let (loss, grad) = detached_loss_and_gradient(episode, state.cell.to_vec())?;
        check_loss(&format!("support (step {step})"), loss)?;
        state = optimizer.step(weights, &state, loss, &grad)?;
        trajectory.push(state.cell.to_vec());
    }
    let phi = state.cell.reshape(&[p])?;
    finish(episode, phi, initial_query_loss, trajectory)
}

fn detached_loss_and_gradient<E: Episode + ?Sized>(episode: &E, params: Vec<f64>) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let x = g.param(Tensor::vector(params));
    let loss = episode.support_loss(x)?;
    let grad = gradient(loss, &[x], false)?.wrt(x).to_vec();
    Ok((loss.item(), grad))
}

fn finish<'g, E: Episode + ?Sized>(
    episode: &E,
    phi: Var<'g>,
    initial_query_loss: f64,
    trajectory: Vec<Vec<f64>>,
) -> Result<AdaptResult<'g>> {
    let (query_loss, query_accuracy) = episode.query_eval(phi)?;
    check_loss("query", query_loss.item())?;
    let grad = gradient(query_loss, &[phi], false)?.wrt(phi).to_vec();
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(AdaptResult {
        adapted: phi,
        initial_query_loss,
        query_loss,
        query_accuracy,
        grad_norm,
        trajectory,
    })
}
