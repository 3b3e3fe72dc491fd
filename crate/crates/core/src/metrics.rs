//! Scalar analyses: the Theil inequality term, correlation, confidence
//! intervals, trajectory shape, and attention-vector summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("losses must be positive, got {0}")]
    NonPositiveLoss(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("weights sum to {0}, not 1")]
    NotNormalized(f64),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// `Σᵢ (Lᵢ/L̄) ln(Lᵢ/L̄)`.
pub fn theil_term(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    if let Some(&bad) = losses.iter().find(|&&l| !(l > 0.0)) {
        return Err(MetricsError::NonPositiveLoss(bad));
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(losses
        .iter()
        .map(|&l| {
            let r = l / mean;
            r * r.ln()
        })
        .sum())
}

/// Differentiable [`theil_term`] of a loss vector.
pub fn theil_term_var<'g>(losses: Var<'g>) -> std::result::Result<Var<'g>, AdError> {
    let ratio = losses.div(losses.mean()?)?;
    ratio.mul(ratio.ln()?)?.sum()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and normal-approximation 95% halfwidth `1.96·s/√n` (0 when n = 1).
pub fn ci95(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Sum of Euclidean step lengths.
    pub path_length: f64,
    /// Mean turning angle between successive non-zero steps, in radians.
    pub oscillation: f64,
    /// Straight-line distance from first to last point.
    pub endpoint_distance: f64,
}

pub fn trajectory_stats(path: &[Vec<f64>]) -> Result<TrajectoryStats> {
    if path.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: path.len(),
        });
    }
    let dim = path[0].len();
    if let Some(p) = path.iter().find(|p| p.len() != dim) {
        return Err(MetricsError::LengthMismatch(dim, p.len()));
    }
    let steps: Vec<Vec<f64>> = path
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let path_length = steps.iter().map(|s| norm(s)).sum();
    let moving: Vec<&Vec<f64>> = steps.iter().filter(|s| norm(s) > 0.0).collect();
    let turns: Vec<f64> = moving
        .windows(2)
        .map(|w| {
            let dot: f64 = w[0].iter().zip(w[1].iter()).map(|(a, b)| a * b).sum();
            (dot / (norm(w[0]) * norm(w[1]))).clamp(-1.0, 1.0).acos()
        })
        .collect();
    let oscillation = if turns.is_empty() {
        0.0
    } else {
        turns.iter().sum::<f64>() / turns.len() as f64
    };
    let first = &path[0];
    let last = &path[path.len() - 1];
    let endpoint: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    Ok(TrajectoryStats {
        path_length,
        oscillation,
        endpoint_distance: norm(&endpoint),
    })
}

/// 1-based rank, by descending attention weight, of the task with the
/// largest loss. Equal weights are ranked by task index; among equal
/// maximal losses the lowest index counts.
pub fn rank_of_max_loss(weights: &[f64], losses: &[f64]) -> Result<usize> {
    if weights.len() != losses.len() {
        return Err(MetricsError::LengthMismatch(weights.len(), losses.len()));
    }
    if weights.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(MetricsError::NotNormalized(total));
    }
    let worst = losses
        .iter()
        .enumerate()
        .fold(0, |best, (i, &l)| if l > losses[best] { i } else { best });
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    Ok(order.iter().position(|&i| i == worst).expect("index present") + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Per-record min, max, and mean of the attention weights.
pub fn attention_trend<W: AsRef<[f64]>>(records: &[W]) -> Vec<AttentionSummary> {
    records
        .iter()
        .map(|w| {
            let w = w.as_ref();
            AttentionSummary {
                min: w.iter().copied().fold(f64::INFINITY, f64::min),
                max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: w.iter().sum::<f64>() / w.len() as f64,
            }
        })
        .collect()
}
