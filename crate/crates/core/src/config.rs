//! Run configuration shared by every command-line entrypoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{BENCHMARK_LAMBDAS, BENCHMARK_SIGMAS};
use crate::models::ModelConfig;
use crate::scheduler::SchedulerConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (manifest plus record file).
    pub dir: PathBuf,
    /// Settings used by `make-data`.
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub seed: u64,
    pub split: Split,
    pub include_zero_filled: bool,
    pub checkpoints: Vec<CheckpointRef>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambdas: BENCHMARK_LAMBDAS.to_vec(),
            sigmas: BENCHMARK_SIGMAS.to_vec(),
            seed: 0,
            split: Split::Test,
            include_zero_filled: true,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Checkpoint to serve; the untrained zero model of `[model]` when absent.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            split: Split::Test,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Where training writes checkpoints and logs.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides `train.scheduler` when present.
    #[serde(default)]
    pub scheduler: Option<SchedulerConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub serve: ServeConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::format("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.data.synthetic.split_fractions.validate()
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.dir);
        self.eval.checkpoints.iter_mut().for_each(|c| fix(&mut c.path));
        if let Some(p) = self.serve.checkpoint.as_mut() {
            fix(p);
        }
    }

    /// Training settings with the top-level scheduler applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = &self.scheduler {
            t.scheduler = s.clone();
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Strategy;

    const EXAMPLE: &str = r#"
out_dir = "runs/cond"

[data]
dir = "data/synthetic"

[data.synthetic]
n = 20
size = 32

[model]
name = "cond"
kind = "unrolled"
cascades = 2
share_weights = false

[model.backbone]
kind = "didn_lite"
init_channels = 8
num_pools = 2
conditioned = true

[model.conditioning]
activation = "leaky_relu"

[train]
epochs = 3
lr = 0.001

[scheduler]
strategy = "cosine_annealed"
phi = 3.0

[serve]
port = 9000
"#;

    #[test]
    fn parses_and_merges_scheduler() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.model.unrolled.cascades, 2);
        assert_eq!(cfg.data.synthetic.n, 20);
        assert_eq!(cfg.data.synthetic.accel, 4.0);
        let t = cfg.train_config();
        assert_eq!(t.scheduler.strategy, Strategy::CosineAnnealed);
        assert_eq!(t.scheduler.phi, 3.0);
        assert_eq!(cfg.serve.port, 9000);
        assert_eq!(cfg.eval.lambdas, vec![0.1, 0.5, 0.9]);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, EXAMPLE).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.dir, dir.path().join("data/synthetic"));
        assert_eq!(cfg.out_dir, dir.path().join("runs/cond"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml(&EXAMPLE.replace("epochs = 3", "epochz = 3")).is_err());
        assert!(RunConfig::from_toml(&EXAMPLE.replace("phi = 3.0", "phi = -1.0")).is_err());
        assert!(RunConfig::from_toml(&EXAMPLE.replace("conditioned = true", "conditioned = false")).is_err());
        assert!(RunConfig::load(Path::new("/nonexistent/run.toml")).is_err());
    }
}
