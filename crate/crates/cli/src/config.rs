//! Experiment configuration: one dataset + one training run + the intended
//! evaluation conditions, loaded from JSON with typo-rejecting parsing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use afsl_core::data::{DatasetConfig, Family};
use afsl_core::eval::EvalCondition;
use afsl_core::train::TrainConfig;
use afsl_core::{Error, Result};

/// One reproducible experiment. `seed` drives evaluation-time attack
/// randomness; the dataset and training loop carry their own seeds so a
/// fixed dataset can be trained under many seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Evaluation condition names, e.g. `["clean", "pgd10", "saturation@3"]`.
    #[serde(default)]
    pub conditions: Vec<String>,
    /// When set, train on the other manipulation families and evaluate on
    /// this one (generalisation protocol).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_family: Option<String>,
    /// Default output directory; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        for name in &self.conditions {
            EvalCondition::parse(name)
                .map_err(|e| Error::InvalidConfig(format!("conditions: {e}")))?;
        }
        if let Some(name) = &self.holdout_family {
            let family: Family = name
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("holdout_family: {e}")))?;
            if !self.dataset.families.contains(&family) {
                return Err(Error::InvalidConfig(format!(
                    "holdout_family: '{name}' is not among the dataset families"
                )));
            }
        }
        Ok(())
    }

    pub fn holdout(&self) -> Result<Option<Family>> {
        self.holdout_family.as_deref().map(str::parse).transpose()
    }

    /// Digest of the canonical JSON serialization; every file a command
    /// writes embeds this so outputs are traceable to their exact config.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses an [`ExperimentConfig`], mapping malformed JSON to a config error
/// whose message names the offending field.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&raw)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// gen-data accepts either a full experiment config (its `dataset` field is
/// used) or a bare dataset config.
pub fn load_dataset_config(path: &Path) -> Result<DatasetConfig> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Artifact(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let dataset_value = match value.get("dataset") {
        Some(inner) => inner.clone(),
        None => value,
    };
    let cfg: DatasetConfig = serde_json::from_value(dataset_value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The canonical desk-scale dataset: 300 videos (a fifth of them real), two
/// clips each, 4-frame 32x32 grayscale. The identity count is what makes
/// held-out videos meaningful: with too few identities a classifier can
/// memorise who is in each video instead of learning the artifacts.
pub fn default_dataset_config() -> DatasetConfig {
    DatasetConfig::small(300, 2, 0)
}
