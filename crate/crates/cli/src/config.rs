use std::path::{Path, PathBuf};

use fairpref::bounds::InstanceFamily;
use fairpref::data::{LlmConfig, SyntheticSpec};
use fairpref::trainer::TrainConfig;
use fairpref::Exec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Category};

pub const DEFAULT_BETAS: [f64; 4] = [0.01, 0.05, 0.1, 0.5];
pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Evaluate and reduce with rayon where the core supports it.
    pub parallel: bool,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            parallel: true,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A generated dataset directory; when absent the synthetic spec is
    /// generated into the output directory.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub llm: LlmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Run grid points concurrently, each in its own directory.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: DEFAULT_BETAS.to_vec(),
            gammas: DEFAULT_GAMMAS.to_vec(),
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub instances: usize,
    pub n: usize,
    pub seed: u64,
    pub family: InstanceFamily,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            n: 8,
            seed: 7,
            family: InstanceFamily::Implicit,
        }
    }
}

impl RunConfig {
    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let range = |e: fairpref::Error| CliError::new(Category::Config, e.to_string());
        self.train.validate().map_err(range)?;
        if self.data.dataset.is_none() {
            self.data.synthetic.validate().map_err(range)?;
        }
        self.data.llm.validate().map_err(range)?;
        for &b in &self.sweep.betas {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CliError::new(
                    Category::Config,
                    format!("sweep.betas: beta must be > 0, got {b}"),
                ));
            }
        }
        for &g in &self.sweep.gammas {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(CliError::new(
                    Category::Config,
                    format!("sweep.gammas: gamma must be >= 0, got {g}"),
                ));
            }
        }
        if self.verify.n < 2 || self.verify.n > fairpref::transport::MAX_LP_SUPPORT {
            return Err(CliError::new(
                Category::Config,
                format!(
                    "verify.n must lie in [2, {}], got {}",
                    fairpref::transport::MAX_LP_SUPPORT,
                    self.verify.n
                ),
            ));
        }
        Ok(())
    }
}

/// Parses TOML, or JSON when the extension is `.json` (the echoed form).
pub fn parse_config(text: &str, json: bool) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = if json {
        serde_json::from_str(text).map_err(|e| CliError::new(Category::Config, e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| CliError::new(Category::Config, e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::new(Category::Io, format!("{}: {e}", path.display()))
    })?;
    let json = path.extension().is_some_and(|e| e == "json");
    parse_config(&text, json).map_err(|e| e.context(path.display().to_string()))
}
