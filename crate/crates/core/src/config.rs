//! Run configuration: one TOML file with `dataset`, `model`, `detector`,
//! `training` and `evaluation` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpr_numerics::Schedule;

use crate::datasets::DatasetConfig;
use crate::detection::DetectorConfig;
use crate::error::{Result, VprError};
use crate::model::{HierarchyConfig, UpdateMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub schedule: Schedule,
    pub iterations: u64,
    pub batch_size: usize,
    /// Sequence length; the dataset's default when absent.
    pub seq_len: Option<usize>,
    pub seed: u64,
    /// Compute F1 on held-out episodes every this many iterations (0 disables).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Train on sequences from this file instead of generating them.
    pub dataset_file: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            iterations: 15_000,
            batch_size: 32,
            seq_len: None,
            seed: 0,
            eval_every: 250,
            eval_episodes: 32,
            checkpoint_every: 1000,
            grad_clip: Some(100.0),
            dataset_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Boundary matching tolerance in steps.
    pub tolerance: usize,
    pub episodes: usize,
    /// Prior samples per disentanglement trial.
    pub samples: usize,
    /// Disentanglement trials.
    pub trials: usize,
    /// One-based level for rollouts and event prediction.
    pub rollout_level: usize,
    pub rollout_steps: usize,
    /// Zero the temporal context of levels below the rollout level.
    pub zero_lower_temporal: bool,
    /// Sample lower-level states instead of taking prior means.
    pub sample_lower: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: 1,
            episodes: 100,
            samples: 32,
            trials: 100,
            rollout_level: 2,
            rollout_steps: 200,
            zero_lower_temporal: false,
            sample_lower: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: HierarchyConfig,
    pub detector: DetectorConfig,
    pub training: TrainingConfig,
    pub evaluation: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VprError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| VprError::Config(format!("cannot serialise config: {e}")))
    }

    /// Observation noise of the dataset, if it has any.
    pub fn dataset_noise(&self) -> f64 {
        match &self.dataset {
            DatasetConfig::Synthetic1d(c) => c.noise,
            _ => 0.0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.training
            .seq_len
            .unwrap_or_else(|| self.dataset.default_length())
    }

    pub fn is_toy(&self) -> bool {
        self.model.update_mode == UpdateMode::Toy
    }

    /// Materialises every dataset-dependent default and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let obs_dim = self.dataset.obs_dim();
        if self.model.obs_dim == 0 {
            self.model.obs_dim = obs_dim;
        } else if self.model.obs_dim != obs_dim {
            return Err(VprError::Dimension(format!(
                "model obs_dim {} does not match dataset obs_dim {obs_dim}",
                self.model.obs_dim
            )));
        }
        self.model
            .recon_loss
            .get_or_insert(self.dataset.recon_loss());
        self.training
            .seq_len
            .get_or_insert(self.dataset.default_length());
        if self.is_toy() {
            let noise = self.dataset_noise();
            let toy = &mut self.model.toy;
            toy.posterior_var = Some(toy.resolved_var(noise));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.detector.validate()?;
        self.training.schedule.validate()?;
        if self.training.batch_size == 0 {
            return Err(VprError::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len() == 0 {
            return Err(VprError::Config("seq_len must be >= 1".into()));
        }
        if self.is_toy() && !matches!(self.dataset, DatasetConfig::Synthetic1d(_)) {
            return Err(VprError::Config(
                "toy mode needs the synthetic1d dataset".into(),
            ));
        }
        if self.evaluation.rollout_level == 0
            || self.evaluation.rollout_level > self.model.num_levels
        {
            return Err(VprError::Config(format!(
                "rollout_level must lie in 1..={}",
                self.model.num_levels
            )));
        }
        if self.evaluation.samples == 0
            || self.evaluation.trials == 0
            || self.evaluation.episodes == 0
        {
            return Err(VprError::Config("evaluation counts must be >= 1".into()));
        }
        Ok(())
    }
}
