use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tembed_core::blocks::BlockConfig;
use tembed_core::diagnostics::DiagnosticsConfig;
use tembed_core::ode::SolverConfig;
use tembed_core::tasks::{TaskConfig, TrainConfig};

use crate::{CliError, CliResult};

/// Environment variable that replaces `seed` in every config.
pub const SEED_ENV: &str = "TEMBED_SEED";

/// One run described as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub block: BlockConfig,
    /// Required by `train` and by training sweeps.
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// When set, replaces `block.seed` and `train.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory used when `--out` is not given.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(block: BlockConfig) -> Self {
        Self {
            block,
            task: None,
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            seed: None,
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Read and parse a config file. Errors name the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| CliError::config(format!("invalid config {}: {}", path.display(), e.message)))
    }

    /// Apply the seed override and fill every defaulted choice, then check
    /// all sections.
    pub fn resolve(mut self, seed_override: Option<u64>) -> CliResult<Self> {
        if let Some(s) = seed_override {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.block.seed = s;
            self.train.seed = s;
        }
        self.task = self.task.map(|t| t.resolved());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.block.validate()?;
        if let Some(task) = &self.task {
            task.validate()?;
        }
        self.train.validate()?;
        self.solver.validate()?;
        self.diagnostics.validate()?;
        Ok(())
    }

    /// The `--out` flag wins over `out_dir`; the current directory is last.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Parse the seed override from the environment, if present.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::config(format!("{SEED_ENV}: {e}"))),
    }
}
