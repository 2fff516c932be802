//! JSON configuration file with sections {data, model, train, losses, eval}.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CohortConfig, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::train::{ModelConfig, RunSpec, TrainConfig};

pub const SEED_ENV: &str = "FNCGEN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Write group-difference matrices as CSV next to each report.
    pub export_csv: bool,
    /// Monte-Carlo draws per class for the ground-truth summary.
    pub ground_truth_mc: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            export_csv: true,
            ground_truth_mc: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub data: CohortConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub eval: EvalConfig,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.losses.validate()?;
        if self.eval.ground_truth_mc < 1000 {
            return Err(Error::Config(format!(
                "eval.ground_truth_mc must be ≥ 1000, got {}",
                self.eval.ground_truth_mc
            )));
        }
        Ok(())
    }

    /// Run specification for a dataset; also validates the model against
    /// the dataset dimensions.
    pub fn run_spec(&self, data: &Dataset) -> Result<RunSpec> {
        let spec = RunSpec::for_dataset(data, self.model.clone(), self.train.clone(), self.losses);
        spec.validate()?;
        Ok(spec)
    }
}

/// Seed precedence: explicit flag, then the environment value, then the
/// config file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}
