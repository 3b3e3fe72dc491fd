use std::path::Path;

use serde::{Deserialize, Serialize};
use taskattn_core::meta::{meta_test, EvalReport};
use taskattn_core::tasks::Pool;

use crate::checkpoint::load_checkpoint;
use crate::config::ExperimentConfig;
use crate::experiment::{Experiment, DOMAIN_TEST};
use crate::{HarnessError, Result};

pub const DEFAULT_EVAL_TASKS: usize = 300;
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: String,
    pub iteration: u64,
    pub seed: u64,
    pub tasks: usize,
    pub report: EvalReport,
}

/// Meta-tests a checkpoint on `n_tasks` tasks of the test pool and writes
/// `eval.json` and `eval.csv` into `out`.
pub fn run_eval(config: &ExperimentConfig, checkpoint: &Path, n_tasks: usize, out: &Path) -> Result<EvalRecord> {
    if n_tasks == 0 {
        return Err(HarnessError::Config("evaluation needs at least one task".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    if !config.compatible_with(&ck.config) {
        return Err(HarnessError::Checkpoint(format!(
            "{} is incompatible with this configuration",
            checkpoint.display()
        )));
    }
    let exp = Experiment::new(config)?;
    let tasks = exp.tasks(Pool::Test, DOMAIN_TEST, n_tasks)?;
    let report = meta_test(&ck.model, &exp.episodes(&tasks), config.train.steps)?;
    let record = EvalRecord {
        label: config.label(),
        iteration: ck.iteration,
        seed: config.seed,
        tasks: n_tasks,
        report,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join(EVAL_JSON),
        serde_json::to_string_pretty(&record).expect("record serializes") + "\n",
    )?;
    let mut w = csv::Writer::from_path(out.join(EVAL_CSV))?;
    w.write_record(["label", "iteration", "seed", "tasks", "mean_accuracy", "ci95"])?;
    w.write_record([
        record.label.clone(),
        record.iteration.to_string(),
        record.seed.to_string(),
        record.tasks.to_string(),
        record.report.mean_accuracy.to_string(),
        record.report.ci95.to_string(),
    ])?;
    w.flush()?;
    Ok(record)
}
