use std::path::Path;

use serde::{Deserialize, Serialize};
use taskattn_core::meta::{Algorithm, TrainConfig};
use taskattn_core::tasks::{GaussianFamily, TaskSpec};

use crate::{HarnessError, Result};

/// Everything a run depends on. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Train with the task-attention curriculum.
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub family: GaussianFamily,
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    /// Iterations between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_output")]
    pub output: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths of the base learner.
    pub hidden: Vec<usize>,
    pub lstm_hidden: usize,
    pub attention_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lstm_hidden: 20,
            attention_width: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Iterations between validation passes; 0 disables validation.
    pub every: u64,
    pub tasks: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { every: 100, tasks: 300 }
    }
}

/// The 2-D quadratic study of optimizer trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub center_scale: f64,
    /// Held-out surfaces whose adaptation paths are measured.
    pub eval_tasks: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            iterations: 500,
            eig_min: 0.5,
            eig_max: 4.0,
            center_scale: 1.0,
            eval_tasks: 20,
        }
    }
}

fn default_task() -> TaskSpec {
    TaskSpec {
        n_way: 5,
        k_shot: 1,
        q_query: 15,
    }
}

fn default_output() -> String {
    "runs/default".into()
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            attention: false,
            family: GaussianFamily::default(),
            task: default_task(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            validation: ValidationConfig::default(),
            trace: TraceConfig::default(),
            checkpoint_every: 0,
            output: default_output(),
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Display name, `ta-` prefixed for attended runs.
    pub fn label(&self) -> String {
        if self.attention {
            format!("ta-{}", self.algorithm)
        } else {
            self.algorithm.to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.task.validate()?;
        if self.attention && !self.algorithm.supports_attention() {
            return Err(HarnessError::Config(format!(
                "task attention needs a batched meta-update; {} has none",
                self.algorithm
            )));
        }
        if self.model.hidden.contains(&0) {
            return Err(HarnessError::Config("hidden widths must be positive".into()));
        }
        if self.algorithm.uses_lstm() && self.model.lstm_hidden == 0 {
            return Err(HarnessError::Config("lstm_hidden must be positive".into()));
        }
        if self.attention && self.model.attention_width == 0 {
            return Err(HarnessError::Config("attention_width must be positive".into()));
        }
        if self.validation.every > 0 && self.validation.tasks == 0 {
            return Err(HarnessError::Config("validation needs at least one task".into()));
        }
        let t = &self.trace;
        if !(t.eig_min > 0.0 && t.eig_max >= t.eig_min && t.center_scale >= 0.0) {
            return Err(HarnessError::Config(format!("invalid trace surface family {t:?}")));
        }
        Ok(())
    }

    /// Whether a checkpoint written under `other` can continue under `self`.
    /// Only the iteration budget and the output location may differ.
    pub fn compatible_with(&self, other: &ExperimentConfig) -> bool {
        let strip = |c: &ExperimentConfig| {
            let mut c = c.clone();
            c.train.iterations = 0;
            c.output = String::new();
            c
        };
        strip(self) == strip(other)
    }
}
