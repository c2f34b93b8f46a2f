use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{training_digest, write_atomic, EngineState, RunConfig};
use crate::dataset::BuildingRecord;
use crate::schema::CueSchema;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {origin}: {source}")]
    Corrupt {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {0} (expected {CHECKPOINT_FORMAT})")]
    Format(u32),
    #[error("checkpoint does not match the current {what}; refusing to resume")]
    Mismatch { what: &'static str },
}

/// Everything needed to continue a run between generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_digest: String,
    pub schema_digest: String,
    pub training_digest: String,
    #[serde(default)]
    pub evaluator_fingerprint: String,
    #[serde(default)]
    pub backend_info: serde_json::Value,
    pub config: RunConfig,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_document(document: &str, origin: &str) -> Result<Self, CheckpointError> {
        let cp: Checkpoint = serde_json::from_str(document).map_err(|source| CheckpointError::Corrupt {
            origin: origin.to_string(),
            source,
        })?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(cp.format));
        }
        if cp.config.digest() != cp.config_digest {
            return Err(CheckpointError::Mismatch { what: "embedded config" });
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, self.to_document().as_bytes()).map_err(|e| match e {
            super::EngineError::Io { path, source } => CheckpointError::Io { path, source },
            other => unreachable!("write_atomic only fails with I/O errors: {other}"),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_document(&text, &path.display().to_string())
    }

    pub fn check_compatible(
        &self,
        config: &RunConfig,
        schema: &CueSchema,
        buildings: &[BuildingRecord],
    ) -> Result<(), CheckpointError> {
        if config.digest() != self.config_digest {
            return Err(CheckpointError::Mismatch { what: "run config" });
        }
        if schema.digest() != self.schema_digest {
            return Err(CheckpointError::Mismatch { what: "cue schema" });
        }
        if training_digest(buildings) != self.training_digest {
            return Err(CheckpointError::Mismatch { what: "training split" });
        }
        Ok(())
    }
}
