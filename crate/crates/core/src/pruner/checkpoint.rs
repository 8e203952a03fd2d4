use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::onnx::{export_model, load_model, LoadOptions};
use crate::graph::ModelGraph;
use crate::pruner::plan::PruningPlan;
use crate::pruner::PruneConfig;

pub const CHECKPOINT_FORMAT: &str = "gcprune-checkpoint-v1";

/// State at an iteration boundary: the partial plan and the current model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: PruneConfig,
    pub exclusions: Vec<String>,
    pub plan: PruningPlan,
    /// Base64 of the serialized model.
    pub model: String,
}

impl Checkpoint {
    pub fn new(config: &PruneConfig, exclusions: &[String], plan: &PruningPlan, g: &ModelGraph) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            exclusions: exclusions.to_vec(),
            plan: plan.clone(),
            model: STANDARD.encode(export_model(g)),
        }
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        let bytes = STANDARD
            .decode(&self.model)
            .map_err(|e| Error::Malformed(format!("checkpoint model is not base64: {e}")))?;
        load_model(&bytes, &LoadOptions::with_exclusions(&self.exclusions))
    }

    /// Writes atomically through a sibling temp file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed(format!("unknown checkpoint format `{}`", c.format)));
        }
        Ok(c)
    }
}
