//! JSON configuration file shared by every CLI verb.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::BoundSuiteConfig;
use crate::error::{Error, Result};
use crate::server::{ExperimentConfig, RunOptions};

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "AIRVOTE_OUT";

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub bounds: Option<BoundSuiteConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub metrics_stride: usize,
    #[serde(default = "one")]
    pub threads: usize,
    /// Fill the `wall_time_s` column. Makes metrics non-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

/// The subset of a config that determines results; echoed into run metadata
/// and hashed into the run id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho<'a> {
    pub experiment: &'a ExperimentConfig,
    pub metrics_stride: usize,
    pub record_wall_time: bool,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics_stride == 0 {
            return Err(Error::Config("metrics_stride must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        if let Some(b) = &self.bounds {
            b.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { eval_stride: self.metrics_stride, threads: self.threads, wall_clock: self.record_wall_time }
    }

    /// `flag`, else `$AIRVOTE_OUT`, else the configured directory.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

impl<'a> ConfigEcho<'a> {
    pub fn new(cfg: &'a ConfigFile, experiment: &'a ExperimentConfig) -> Self {
        ConfigEcho { experiment, metrics_stride: cfg.metrics_stride, record_wall_time: cfg.record_wall_time }
    }

    /// First 12 hex digits of the SHA-256 of the canonical echo.
    pub fn run_id(&self) -> String {
        let canon = serde_json::to_vec(self).expect("echo serializes");
        let digest = Sha256::digest(&canon);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
