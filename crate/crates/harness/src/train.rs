use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use taskattn_core::meta::{meta_step, meta_test, task_attended_step, EvalReport, StepRecord};
use taskattn_core::tasks::Pool;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::experiment::{Experiment, DOMAIN_FRESH, DOMAIN_TRAIN, DOMAIN_VALIDATION};
use crate::{HarnessError, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const TIMING_LOG: &str = "timing.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const DIVERGENCE: &str = "divergence.json";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iteration: u64,
    /// Validation passes made by this invocation.
    pub validation: Vec<(u64, EvalReport)>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct DivergenceRecord<'a> {
    iteration: u64,
    message: &'a str,
}

/// Columns of the per-iteration training log for a batch of `b` tasks:
/// `iteration`, then per task the query loss after adaptation, accuracy,
/// attention weight (empty without attention), gradient norm, loss ratio,
/// and query loss before adaptation.
pub fn log_header(b: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string()];
    for prefix in ["loss", "acc", "w", "grad_norm", "loss_ratio", "initial_loss"] {
        h.extend((0..b).map(|i| format!("{prefix}_{i}")));
    }
    h
}

fn log_row(iteration: u64, r: &StepRecord) -> Vec<String> {
    let b = r.query_losses.len();
    let mut row = vec![iteration.to_string()];
    row.extend(r.query_losses.iter().map(f64::to_string));
    row.extend(r.accuracies.iter().map(f64::to_string));
    match &r.weights {
        Some(w) => row.extend(w.iter().map(f64::to_string)),
        None => row.extend(std::iter::repeat_n(String::new(), b)),
    }
    row.extend(r.infos.iter().map(|m| m.grad_norm.to_string()));
    row.extend(r.infos.iter().map(|m| m.loss_ratio.to_string()));
    row.extend(r.initial_losses.iter().map(f64::to_string));
    row
}

/// Writes `divergence.json` when `err` is a divergence abort, then hands the
/// error back.
fn diagnose(out: &Path, iteration: u64, err: HarnessError) -> HarnessError {
    if let HarnessError::Divergence(message) = &err {
        let diag = DivergenceRecord { iteration, message };
        let text = serde_json::to_string_pretty(&diag).expect("record serializes") + "\n";
        if let Err(io) = std::fs::write(out.join(DIVERGENCE), text) {
            return io.into();
        }
    }
    err
}

fn open_log(path: &Path, header: &[String], fresh: bool) -> Result<csv::Writer<File>> {
    let exists = path.exists();
    let file = if fresh {
        File::create(path)?
    } else {
        OpenOptions::new().create(true).append(true).open(path)?
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh || !exists {
        w.write_record(header)?;
    }
    Ok(w)
}

/// Trains `config` into `out`, optionally resuming from a checkpoint.
///
/// Logs are created fresh for a new run and appended to on resume, so a
/// run interrupted at a checkpoint and resumed writes the same bytes as an
/// uninterrupted one. Wall-clock times go to a separate timing log.
pub fn run_train(config: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let exp = Experiment::new(config)?;
    std::fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if !config.compatible_with(&ck.config) {
                return Err(HarnessError::Checkpoint(format!(
                    "{} was written under a different configuration",
                    path.display()
                )));
            }
            if ck.iteration > config.train.iterations {
                return Err(HarnessError::Checkpoint(format!(
                    "checkpoint is at iteration {}, beyond the budget of {}",
                    ck.iteration, config.train.iterations
                )));
            }
            Checkpoint {
                config: config.clone(),
                ..ck
            }
        }
        None => exp.initial_checkpoint(),
    };
    let fresh = resume.is_none();
    let b = config.train.batch_size;
    let mut train_log = open_log(&out.join(TRAIN_LOG), &log_header(b), fresh)?;
    let mut validation_log = open_log(
        &out.join(VALIDATION_LOG),
        &["iteration", "mean_accuracy", "ci95"].map(String::from),
        fresh,
    )?;
    let mut timing_log = open_log(
        &out.join(TIMING_LOG),
        &["iteration", "seconds"].map(String::from),
        fresh,
    )?;

    let every = config.validation.every;
    let val_tasks = if every > 0 {
        exp.tasks(Pool::Val, DOMAIN_VALIDATION, config.validation.tasks)?
    } else {
        Vec::new()
    };
    let val_episodes = exp.episodes(&val_tasks);
    let mut validation = Vec::new();
    let mut validate = |state: &Checkpoint, log: &mut csv::Writer<File>| -> Result<()> {
        let report = meta_test(&state.model, &val_episodes, config.train.steps)
            .map_err(|e| diagnose(out, state.iteration, e.into()))?;
        log.write_record([
            state.iteration.to_string(),
            report.mean_accuracy.to_string(),
            report.ci95.to_string(),
        ])?;
        log.flush()?;
        validation.push((state.iteration, report));
        Ok(())
    };
    if fresh && every > 0 {
        validate(&state, &mut validation_log)?;
    }

    let checkpoint_path = out.join(CHECKPOINT);
    for it in state.iteration..config.train.iterations {
        let started = Instant::now();
        let batch = exp.batch(DOMAIN_TRAIN, it)?;
        let episodes = exp.episodes(&batch);
        let outcome = match (&exp.attention, &mut state.delta, &mut state.delta_adam) {
            (Some(net), Some(delta), Some(delta_adam)) => {
                let fresh_batch = exp.batch(DOMAIN_FRESH, it)?;
                let fresh_episodes = exp.episodes(&fresh_batch);
                task_attended_step(
                    &mut state.model,
                    &mut state.theta_adam,
                    net,
                    delta,
                    delta_adam,
                    &episodes,
                    &fresh_episodes,
                    config.train.steps,
                )
            }
            (None, _, _) => meta_step(&mut state.model, &mut state.theta_adam, &episodes, &config.train),
            _ => {
                return Err(HarnessError::Checkpoint(
                    "attention state missing from checkpoint".into(),
                ))
            }
        };
        let record = outcome.map_err(|e| diagnose(out, it, e.into()))?;
        train_log.write_record(log_row(it, &record))?;
        timing_log.write_record([it.to_string(), started.elapsed().as_secs_f64().to_string()])?;
        state.iteration = it + 1;
        state.rng.next_iteration = it + 1;
        if every > 0 && state.iteration % every == 0 {
            train_log.flush()?;
            validate(&state, &mut validation_log)?;
        }
        if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
            train_log.flush()?;
            save_checkpoint(&state, &checkpoint_path)?;
        }
    }
    train_log.flush()?;
    timing_log.flush()?;
    save_checkpoint(&state, &checkpoint_path)?;
    Ok(TrainSummary {
        iteration: state.iteration,
        validation,
        checkpoint: checkpoint_path,
    })
}
