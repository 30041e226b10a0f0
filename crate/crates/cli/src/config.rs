//! Strict run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Optional defaults for CLI flags. Any unknown key is rejected so that
/// `c`, `lambda` and `gamma` can never be confused silently.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub registry: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub world_model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub latent_dim: Option<usize>,
    pub diffusion_steps: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub c: Option<f64>,
    pub seeds: Option<Vec<u64>>,
    pub horizons: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema_version {}", cfg.schema_version)));
        }
        if let Some(l) = cfg.lambda {
            if l.is_nan() || l < 0.0 {
                return Err(CliError::Config("lambda must be non-negative".into()));
            }
        }
        if cfg.k == Some(0) {
            return Err(CliError::Config("K must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Parses and checks that every referenced input file exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        for p in [&cfg.registry, &cfg.codec, &cfg.world_model].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("referenced path does not exist: {}", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), Self::load)
    }
}
