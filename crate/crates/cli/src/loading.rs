//! Config, dataset and model loading with exit-code classification.

use std::fs;
use std::path::{Path, PathBuf};

use condrecon::config::RunConfig;
use condrecon::data::Dataset;
use condrecon::models::{load_checkpoint, CheckpointMeta};
use condrecon::training::{LogRecord, LOG_FILE};
use condrecon::Model;

use crate::error::{CliError, CliResult, Context, EXIT_CHECKPOINT, EXIT_DATA};

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    if !path.is_file() {
        return Err(CliError::usage(format!("config file {} not found", path.display())));
    }
    RunConfig::load(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Dataset::load(dir).ctx(&format!("dataset {}", dir.display()), EXIT_DATA)
}

/// A model plus where it came from.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model,
    /// Checkpoint path, or `None` for the untrained zero model.
    pub path: Option<PathBuf>,
    pub meta: Option<CheckpointMeta>,
}

impl LoadedModel {
    pub fn source(&self) -> String {
        match &self.path {
            Some(p) => p.display().to_string(),
            None => "untrained (zero weights)".into(),
        }
    }

    /// Epoch records of the training log next to the checkpoint, if any.
    pub fn training_log(&self) -> Vec<LogRecord> {
        let Some(log) = self.path.as_deref().and_then(Path::parent).map(|d| d.join(LOG_FILE)) else {
            return Vec::new();
        };
        let Ok(text) = fs::read_to_string(&log) else {
            return Vec::new();
        };
        text.lines()
            .filter_map(|l| serde_json::from_str::<LogRecord>(l).ok())
            .filter(|r| matches!(r, LogRecord::Epoch { .. }))
            .collect()
    }
}

/// Loads `checkpoint` when given, otherwise the zero-weight model of `[model]`,
/// whose output at λ = 0 is the zero-filled image.
pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<LoadedModel> {
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).ctx(&format!("checkpoint {}", path.display()), EXIT_CHECKPOINT)?;
            Ok(LoadedModel {
                model: ckpt.model,
                path: Some(path.to_path_buf()),
                meta: Some(ckpt.meta),
            })
        }
        None => Ok(LoadedModel {
            model: Model::zeros(cfg.model.clone()).ctx("model config", crate::error::EXIT_USAGE)?,
            path: None,
            meta: None,
        }),
    }
}
