//! Experiment orchestration for the task-attended meta-learners in
//! `taskattn-core`: configuration, training with checkpoints and validation,
//! meta-testing, optimizer trajectory traces, and attention analysis.

pub mod analyze;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod trace;
pub mod train;

use taskattn_core::meta::MetaError;
use taskattn_core::tasks::TaskError;
use thiserror::Error;

pub use analyze::run_analyze;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use eval::{run_eval, EvalRecord};
pub use trace::{run_trace, TraceRow};
pub use train::{run_train, TrainSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("log error: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Meta(MetaError),
}

impl HarnessError {
    /// 2 for a divergence abort, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Divergence(_) => 2,
            _ => 1,
        }
    }
}

impl From<MetaError> for HarnessError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::Divergence(m) => HarnessError::Divergence(m),
            MetaError::Config(m) => HarnessError::Config(m),
            MetaError::Task(t) => HarnessError::Config(t.to_string()),
            other => HarnessError::Meta(other),
        }
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Log(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(HarnessError::Config("--threads must be at least 1".into())),
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(f()),
    }
}
