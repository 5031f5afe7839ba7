//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{TriageTable, TriageTableError};
use crate::harness::ExecutionLimits;
use crate::llm::{LlmSettings, Mode};
use crate::miner::{default_tiers, validate_tiers, MinerError, QueryFilters, StarTier};
use crate::restore::RestorePolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Tiers(#[from] MinerError),
    #[error(transparent)]
    Triage(#[from] TriageTableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Replay,
    Driver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub kind: ExecutorKind,
    /// Directory of recorded `*.trace.json` files.
    pub traces: PathBuf,
    pub driver: PathBuf,
    pub interpreter: Option<PathBuf>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            kind: ExecutorKind::Replay,
            traces: "traces".into(),
            driver: "kernel_driver.py".into(),
            interpreter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvisionerKind {
    #[default]
    Index,
    Venv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub provisioner: ProvisionerKind,
    /// Package catalogue for the offline provisioner.
    pub index: PathBuf,
    pub root: PathBuf,
    pub base_python: PathBuf,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            provisioner: ProvisionerKind::Index,
            index: "packages.json".into(),
            root: "sandboxes".into(),
            base_python: "python3".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub mode: Mode,
    pub store: PathBuf,
    #[serde(flatten)]
    pub settings: LlmSettings,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            mode: Mode::Replay,
            store: "llm".into(),
            settings: LlmSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    pub tiers: Vec<StarTier>,
    #[serde(flatten)]
    pub filters: QueryFilters,
    pub corpus: PathBuf,
    /// Offline repository index; used instead of the search API when set.
    pub index: Option<PathBuf>,
    /// Local mirror or base URL that repositories are cloned from.
    pub clone_base: String,
    pub api_base: Option<String>,
    pub notebook_fraction: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            tiers: default_tiers(),
            filters: QueryFilters::default(),
            corpus: "corpus".into(),
            index: None,
            clone_base: "https://github.com".into(),
            api_base: None,
            notebook_fraction: 0.13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub limits: ExecutionLimits,
    pub restore: RestorePolicy,
    pub llm: LlmConfig,
    pub executor: ExecutorConfig,
    pub sandbox: SandboxConfig,
    pub miner: MinerConfig,
    /// Error-name mapping table; the built-in table when unset.
    pub triage: Option<PathBuf>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            limits: ExecutionLimits::default(),
            restore: RestorePolicy::default(),
            llm: LlmConfig::default(),
            executor: ExecutorConfig::default(),
            sandbox: SandboxConfig::default(),
            miner: MinerConfig::default(),
            triage: None,
            workers: 1,
            seed: 0,
        }
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        validate_tiers(&cfg.miner.tiers)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.llm.store);
        fix(&mut self.executor.traces);
        fix(&mut self.executor.driver);
        fix(&mut self.sandbox.index);
        fix(&mut self.sandbox.root);
        fix(&mut self.miner.corpus);
        if let Some(p) = self.miner.index.as_mut() {
            fix(p);
        }
        if let Some(p) = self.triage.as_mut() {
            fix(p);
        }
    }

    pub fn triage_table(&self) -> Result<TriageTable, ConfigError> {
        Ok(match &self.triage {
            Some(path) => TriageTable::load(path)?,
            None => TriageTable::builtin().clone(),
        })
    }
}
