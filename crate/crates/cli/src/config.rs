//! Config file schema. Every section rejects unknown keys; flags override values read here.

use std::fs;
use std::path::{Path, PathBuf};

use lora_landscape::experiments::{CeSweepConfig, RankSelectionConfig, SweepConfig};
use lora_landscape::optimizer::TrainConfig;
use lora_landscape::rng::GENERATOR_ID;
use lora_landscape::synthetic::{LossKind, DEFAULT_MAX_OPERATOR_ENTRIES};
use lora_landscape::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub out: Option<PathBuf>,
    /// 0 lets the pool pick one worker per core.
    pub workers: usize,
    pub max_operator_entries: usize,
    pub generator: String,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            out: None,
            workers: 0,
            max_operator_entries: DEFAULT_MAX_OPERATOR_ENTRIES,
            generator: GENERATOR_ID.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub target_rank: usize,
    pub noise_std: f64,
    pub loss: LossKind,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { m: 16, n: 16, k: 2, samples: 32, seed: 0, target_rank: 1, noise_std: 0.01, loss: LossKind::Mse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub samples: usize,
    pub cstar: f64,
    pub ranks: Vec<usize>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { m: 768, n: 768, k: 2, samples: 32, cstar: 1.35, ranks: vec![1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JstatsConfig {
    pub effective_rank_fraction: f64,
    pub seed: u64,
}

impl Default for JstatsConfig {
    fn default() -> Self {
        Self { effective_rank_fraction: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub global: GlobalConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub thresholds: ThresholdConfig,
    pub rank_select: RankSelectionConfig,
    pub ce: CeSweepConfig,
    pub jstats: JstatsConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| {
            Error::InvalidArgument(format!("config {}: {}", path.display(), e.message().replace('\n', " ")))
        })?;
        if cfg.global.generator != GENERATOR_ID {
            return Err(Error::InvalidArgument(format!(
                "config requests generator `{}`, this build provides `{GENERATOR_ID}`",
                cfg.global.generator
            )));
        }
        Ok(cfg)
    }

    /// Writes `effective_config.toml` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        let text = toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config snapshot: {e}")))?;
        let path = dir.join("effective_config.toml");
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
