//! The block hierarchy: per-level networks, the batched routing runtime and
//! the minimal single-level toy instance.

mod hierarchy;
mod runtime;
mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vpr_numerics::ParamStore;

pub use hierarchy::{Hierarchy, LevelNets};
pub use runtime::{Counters, Detector, KlParts, LevelSnapshot, Runtime, Sampling, StepInfo};
pub use toy::{ToyConfig, ToyEpisode, ToyModel, ToyStep};

use crate::config::RunConfig;
use crate::datasets::ReconLoss;
use crate::error::{Result, VprError};

/// How levels above the first decide when to update.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Criteria E and U gate every level above the first.
    #[default]
    Adaptive,
    /// Level `n` updates when level `n - 1` does and `t` is a multiple of
    /// `intervals[n - 1]`. The first interval must be 1.
    Fixed(Vec<usize>),
    /// The single-level toy instance.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    pub num_levels: usize,
    pub latent_dim: usize,
    /// Width of `x`, `c`, `d` and of every hidden layer.
    pub deter_dim: usize,
    /// Zero means "take it from the dataset".
    pub obs_dim: usize,
    /// Dense layers per residual stack and Gaussian head.
    pub layers: usize,
    pub update_mode: UpdateMode,
    /// Taken from the dataset when absent.
    pub recon_loss: Option<ReconLoss>,
    pub toy: ToyConfig,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            num_levels: 2,
            latent_dim: 20,
            deter_dim: 200,
            obs_dim: 0,
            layers: 4,
            update_mode: UpdateMode::Adaptive,
            recon_loss: None,
            toy: ToyConfig::default(),
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(VprError::Config("num_levels must be >= 1".into()));
        }
        if self.latent_dim == 0 || self.deter_dim == 0 || self.layers == 0 {
            return Err(VprError::Config(
                "latent_dim, deter_dim and layers must be >= 1".into(),
            ));
        }
        if self.obs_dim == 0 {
            return Err(VprError::Config("obs_dim must be >= 1".into()));
        }
        match &self.update_mode {
            UpdateMode::Fixed(k) => {
                if k.len() != self.num_levels {
                    return Err(VprError::Config(format!(
                        "fixed mode needs {} intervals, got {}",
                        self.num_levels,
                        k.len()
                    )));
                }
                if k.first() != Some(&1) {
                    return Err(VprError::Config(
                        "the first level must update every step".into(),
                    ));
                }
                if k.contains(&0) || k.windows(2).any(|w| w[1] < w[0]) {
                    return Err(VprError::Config(
                        "intervals must be positive and non-decreasing".into(),
                    ));
                }
            }
            UpdateMode::Toy => {
                if self.num_levels != 1 || self.obs_dim != 1 {
                    return Err(VprError::Config(
                        "toy mode is a single level on scalar data".into(),
                    ));
                }
                self.toy.validate()?;
            }
            UpdateMode::Adaptive => {}
        }
        Ok(())
    }
}

/// Either a full hierarchy or the toy instance, as selected by the update mode.
#[derive(Clone, Debug)]
pub enum Model {
    Hierarchy(Hierarchy),
    Toy(ToyModel),
}

impl Model {
    /// Registers freshly initialised parameters for a resolved config.
    pub fn init<R: Rng + ?Sized>(
        config: &RunConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.is_toy() {
            Ok(Self::Toy(ToyModel::new(
                &config.model.toy,
                config.dataset_noise(),
                store,
                rng,
            )?))
        } else {
            Ok(Self::Hierarchy(Hierarchy::new(&config.model, store, rng)?))
        }
    }

    /// Layout for parameters loaded from a checkpoint.
    pub fn for_store(config: &RunConfig, store: &ParamStore) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let model = Self::init(config, &mut fresh, &mut rng)?;
        let expected: Vec<(&str, &[usize])> = fresh.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(VprError::Contract(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        Ok(model)
    }

    pub fn num_levels(&self) -> usize {
        match self {
            Self::Hierarchy(h) => h.num_levels(),
            Self::Toy(_) => 1,
        }
    }

    pub fn as_hierarchy(&self) -> Result<&Hierarchy> {
        match self {
            Self::Hierarchy(h) => Ok(h),
            Self::Toy(_) => Err(VprError::Config(
                "this operation needs a full hierarchy".into(),
            )),
        }
    }
}
