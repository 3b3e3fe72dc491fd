//! Meta-trains MetaLSTM and MetaLSTM++ side by side on random 2-D quadratic
//! surfaces and measures how their trajectories move.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use taskattn_core::autodiff::{Graph, Tensor};
use taskattn_core::meta::{meta_update_metalstm_batch, meta_update_metalstm_sequential, Adam, Algorithm, MetaModel};
use taskattn_core::metrics::trajectory_stats;
use taskattn_core::tasks::{seed_stream, QuadraticTask};

use crate::config::ExperimentConfig;
use crate::experiment::{DOMAIN_INIT, DOMAIN_TRACE, DOMAIN_TRACE_EVAL};
use crate::{HarnessError, Result};

pub const TRACE_CSV: &str = "trace.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const VARIANTS: [Algorithm; 2] = [Algorithm::MetaLstm, Algorithm::MetaLstmPlusPlus];

/// One variant trained under one seed.
///
/// `path_length`, `oscillation`, `endpoint_distance` and `final_loss` are
/// means over the adaptation trajectories on held-out surfaces after
/// meta-training. The `meta_` columns describe the path of the learned
/// initial point c₀ during meta-training, the `weight_` columns the path of
/// all meta-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub variant: Algorithm,
    pub path_length: f64,
    pub oscillation: f64,
    pub endpoint_distance: f64,
    pub final_loss: f64,
    pub meta_path_length: f64,
    pub meta_oscillation: f64,
    pub weight_path_length: f64,
    pub weight_oscillation: f64,
}

#[derive(Serialize)]
struct PointRow {
    seed: u64,
    variant: Algorithm,
    kind: &'static str,
    task: usize,
    step: usize,
    x: f64,
    y: f64,
}

fn surfaces(config: &ExperimentConfig, seed: u64, domain: u64, index: u64, n: usize) -> Vec<QuadraticTask> {
    let t = &config.trace;
    let mut rng = seed_stream(seed, domain, index);
    (0..n)
        .map(|_| QuadraticTask::random(&mut rng, t.eig_min, t.eig_max, t.center_scale))
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn trace_variant(
    config: &ExperimentConfig,
    seed: u64,
    variant: Algorithm,
    points: &mut Vec<PointRow>,
) -> Result<TraceRow> {
    let train = &config.train;
    let mut rng = seed_stream(seed, DOMAIN_INIT, 0);
    let base = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let mut model = MetaModel::new(variant, base, train.inner_lr, config.model.lstm_hidden, &mut rng);
    let mut adam = Adam::new(train.meta_lr, model.theta.len());

    let mut weights = vec![model.theta.clone()];
    let mut c0 = vec![model.initial_params().to_vec()];
    for it in 0..config.trace.iterations {
        let batch = surfaces(config, seed, DOMAIN_TRACE, it, train.batch_size);
        match variant {
            Algorithm::MetaLstm => meta_update_metalstm_sequential(&mut model, &mut adam, &batch, train.steps)?,
            _ => meta_update_metalstm_batch(&mut model, &mut adam, &batch, train.steps)?,
        };
        weights.push(model.theta.clone());
        c0.push(model.initial_params().to_vec());
    }

    let held_out = surfaces(config, seed, DOMAIN_TRACE_EVAL, 0, config.trace.eval_tasks);
    let mut adapt_stats = Vec::with_capacity(held_out.len());
    let mut final_losses = Vec::with_capacity(held_out.len());
    for (task_index, task) in held_out.iter().enumerate() {
        let g = Graph::new();
        let theta = g.param(Tensor::vector(model.theta.clone()));
        let result = model.adapt(theta, task, train.steps, false)?;
        final_losses.push(result.query_loss.item());
        adapt_stats.push(trajectory_stats(&result.trajectory).map_err(|e| HarnessError::Log(e.to_string()))?);
        for (step, p) in result.trajectory.iter().enumerate() {
            points.push(PointRow {
                seed,
                variant,
                kind: "adapt",
                task: task_index,
                step,
                x: p[0],
                y: p[1],
            });
        }
    }
    for (step, p) in c0.iter().enumerate() {
        points.push(PointRow {
            seed,
            variant,
            kind: "meta",
            task: 0,
            step,
            x: p[0],
            y: p[1],
        });
    }
    let stats = |path: &[Vec<f64>]| trajectory_stats(path).map_err(|e| HarnessError::Log(e.to_string()));
    let meta = stats(&c0)?;
    let weight = stats(&weights)?;
    Ok(TraceRow {
        seed,
        variant,
        path_length: mean(adapt_stats.iter().map(|s| s.path_length)),
        oscillation: mean(adapt_stats.iter().map(|s| s.oscillation)),
        endpoint_distance: mean(adapt_stats.iter().map(|s| s.endpoint_distance)),
        final_loss: mean(final_losses.into_iter()),
        meta_path_length: meta.path_length,
        meta_oscillation: meta.oscillation,
        weight_path_length: weight.path_length,
        weight_oscillation: weight.oscillation,
    })
}

/// Runs the study for every configured seed and writes `trace.csv` (one row
/// per variant per seed) and `trajectories.csv` (every recorded point).
pub fn run_trace(config: &ExperimentConfig, out: &Path) -> Result<Vec<TraceRow>> {
    config.validate()?;
    if config.trace.seeds.is_empty() || config.trace.eval_tasks == 0 {
        return Err(HarnessError::Config(
            "trace needs at least one seed and one held-out surface".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &seed in &config.trace.seeds {
        for variant in VARIANTS {
            rows.push(trace_variant(config, seed, variant, &mut points)?);
        }
    }
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(TRACE_CSV))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(TRAJECTORIES_CSV))?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(rows)
}
