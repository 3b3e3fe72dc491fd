use std::path::Path;

use serde::{Deserialize, Serialize};
use taskattn_core::meta::{Adam, MetaModel};

use crate::config::ExperimentConfig;
use crate::{HarnessError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Task streams are indexed by iteration, so the seed and the next
/// iteration fully determine every future draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Completed outer iterations.
    pub iteration: u64,
    pub model: MetaModel,
    pub theta_adam: Adam,
    pub delta: Option<Vec<f64>>,
    pub delta_adam: Option<Adam>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(HarnessError::Checkpoint(format!(
                    "version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(HarnessError::Checkpoint("missing version".into())),
        }
        let checkpoint: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        checkpoint.model.validate()?;
        if checkpoint.delta.is_some() != checkpoint.delta_adam.is_some() {
            return Err(HarnessError::Checkpoint(
                "attention weights and their optimizer state must come together".into(),
            ));
        }
        Ok(checkpoint)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, checkpoint.to_json())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text =
        std::fs::read_to_string(path).map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}
