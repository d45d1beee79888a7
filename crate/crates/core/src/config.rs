//! Pipeline configuration file. Every field defaults to the reference setup
//! and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cartpole::{Objective, PhysicsParams};
use crate::diffcore::hex;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::evaluator::{self, GridObjective};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            steps: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub grid: Vec<GridObjective>,
    pub n_starts: usize,
    pub start_seed: u64,
    /// Policies trained with seeds `train.seed .. train.seed + n_seeds`.
    pub n_seeds: usize,
    pub scenario_omega_thetas: Vec<f64>,
    pub specialist_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: evaluator::benchmark_grid(),
            n_starts: 100,
            start_seed: evaluator::START_SET_SEED,
            n_seeds: 10,
            scenario_omega_thetas: vec![3.0, 1.0],
            specialist_tolerance: 0.15,
        }
    }
}

impl EvalConfig {
    pub fn fixed_objectives(&self) -> Vec<Objective> {
        self.grid
            .iter()
            .filter_map(|g| match g {
                GridObjective::Fixed(o) => Some(*o),
                GridObjective::Sampled => None,
            })
            .collect()
    }
}

/// Artifact locations relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: String,
    pub models: String,
    pub policies: String,
    pub report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            models: "models".into(),
            policies: "policies".into(),
            report: "report".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub physics: PhysicsParams,
    pub dataset: DatasetConfig,
    pub ensemble: EnsembleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        if self.dataset.episodes == 0 || self.dataset.steps == 0 {
            return Err(Error::Config("dataset episodes and steps must be >= 1".into()));
        }
        self.ensemble.validate()?;
        self.train.validate()?;
        if self.eval.n_starts == 0 || self.eval.n_seeds == 0 {
            return Err(Error::Config("eval n_starts and n_seeds must be >= 1".into()));
        }
        if let Some(o) = self.eval.fixed_objectives().iter().find(|o| !o.in_training_box()) {
            return Err(Error::Config(format!("grid objective {o:?} outside the training box")));
        }
        Ok(())
    }

    /// Training seeds of the variable objective policies.
    pub fn policy_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64).map(|i| self.train.seed + i).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}
