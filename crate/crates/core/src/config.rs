//! Declarative experiment files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, TransferSpec};
use crate::error::{Error, Result};
use crate::mdp::{make_env, EnvSpec};
use crate::refine::RefineConfig;

/// Size of a sampled trajectory dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub trajectories: usize,
    pub max_len: usize,
}

impl DatasetConfig {
    fn validate(&self, fields: [&'static str; 2]) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::spec(fields[0], "must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::spec(fields[1], "must be positive"));
        }
        Ok(())
    }
}

/// One experiment: environment, data sizes, refinement and agent settings.
///
/// `seed` is the only seed: it overrides the seeds of the refinement, agent
/// and transfer sections.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub env: EnvSpec,
    pub dataset: DatasetConfig,
    /// Held-out trajectories for evaluation.
    #[serde(default)]
    pub test: Option<DatasetConfig>,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub transfer: Option<TransferSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; a missing or unreadable file is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.refine.seed = seed;
        self.agent.seed = seed;
        if let Some(t) = &mut self.transfer {
            t.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        make_env(&self.env)?;
        self.dataset.validate(["dataset.trajectories", "dataset.max_len"])?;
        if let Some(t) = &self.test {
            t.validate(["test.trajectories", "test.max_len"])?;
        }
        self.refine.validate()?;
        AgentConfig {
            kind: crate::agents::AgentKind::Scratch,
            ..self.agent.clone()
        }
        .validate()?;
        if let Some(t) = &self.transfer {
            make_env(&t.train)?;
            if let Some(d) = &t.dataset_env {
                make_env(d)?;
            }
            for task in &t.tests {
                make_env(&task.env)?;
            }
            if t.repeats == 0 {
                return Err(Error::spec("transfer.repeats", "must be positive"));
            }
        }
        Ok(())
    }

    /// Seed of the held-out test dataset, distinct from the training seed.
    pub fn test_seed(&self) -> u64 {
        self.seed ^ 0x7E57_7E57_7E57_7E57
    }
}
