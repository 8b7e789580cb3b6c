//! Synthetic sequence generators with exact ground-truth boundaries.
//!
//! Timesteps are zero-based. A boundary at `t` means observation `t` is the
//! first of a new segment, so `t = 0` is never a boundary and boundaries lie
//! in `1..T`.

mod io;
mod moving_ball;
mod nested;
mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, write_dataset, DatasetRecord};
pub use moving_ball::{MovingBallConfig, Recolor, COLOR_FACTOR};
pub use nested::{NestedFactorsConfig, PeriodMode};
pub use synthetic::Synthetic1DConfig;

use crate::error::{Result, VprError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    /// `T x obs_dim`.
    pub observations: Vec<Vec<f64>>,
    /// Per factor, strictly increasing steps in `1..T`.
    pub boundaries: Vec<Vec<usize>>,
    /// Per factor, the factor's value at every step.
    pub factor_values: Vec<Vec<f64>>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let dim = self.obs_dim();
        if self.observations.iter().any(|o| o.len() != dim) {
            return Err(VprError::Dimension("ragged observations".into()));
        }
        for b in &self.boundaries {
            if b.windows(2).any(|w| w[0] >= w[1]) || b.iter().any(|&s| s == 0 || s >= t) {
                return Err(VprError::Contract(format!(
                    "bad boundary list {b:?} for T={t}"
                )));
            }
        }
        if self.factor_values.iter().any(|f| f.len() != t) {
            return Err(VprError::Dimension(
                "factor values must cover every step".into(),
            ));
        }
        Ok(())
    }
}

/// Which reconstruction likelihood the dataset calls for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Summed squared error, for unbounded continuous features.
    SquaredError,
    /// Bernoulli cross-entropy on logits, for features in `[0, 1]`.
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic1d(Synthetic1DConfig),
    MovingBall(MovingBallConfig),
    NestedFactors(NestedFactorsConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::MovingBall(MovingBallConfig::default())
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Synthetic1d(c) => c.validate(),
            Self::MovingBall(c) => c.validate(),
            Self::NestedFactors(c) => c.validate(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Synthetic1d(_) => 1,
            Self::MovingBall(c) => c.obs_dim(),
            Self::NestedFactors(c) => c.obs_dim(),
        }
    }

    pub fn default_length(&self) -> usize {
        match self {
            Self::Synthetic1d(_) | Self::MovingBall(_) => 15,
            Self::NestedFactors(_) => 50,
        }
    }

    pub fn recon_loss(&self) -> ReconLoss {
        match self {
            Self::Synthetic1d(_) => ReconLoss::SquaredError,
            Self::MovingBall(_) | Self::NestedFactors(_) => ReconLoss::BinaryCrossEntropy,
        }
    }

    pub fn num_factors(&self) -> usize {
        match self {
            Self::Synthetic1d(_) => 1,
            Self::MovingBall(_) => 3,
            Self::NestedFactors(c) => c.periods.len(),
        }
    }

    /// The factor whose boundaries a given one-based model level should find.
    pub fn factor_for_level(&self, level: usize) -> Option<usize> {
        match (self, level) {
            (Self::Synthetic1d(_), 1) => Some(0),
            (Self::MovingBall(_), 2) => Some(COLOR_FACTOR),
            (Self::NestedFactors(c), n) if n >= 1 && n <= c.periods.len() => Some(n - 1),
            _ => None,
        }
    }

    /// Number of discrete values each factor takes after [`Self::factor_labels`].
    pub fn factor_cardinalities(&self) -> Vec<usize> {
        match self {
            Self::Synthetic1d(c) => vec![c.levels],
            Self::MovingBall(c) => vec![POSITION_BINS, POSITION_BINS, c.colors],
            Self::NestedFactors(c) => vec![c.cardinality; c.periods.len()],
        }
    }

    /// Reads discrete factor values back from an observation (or a
    /// reconstruction of one). Positions are binned into
    /// [`POSITION_BINS`] equal cells.
    pub fn factor_labels(&self, obs: &[f64]) -> Vec<usize> {
        match self {
            Self::Synthetic1d(c) => {
                let k = ((obs[0] - c.low) / c.gap()).round();
                vec![k.clamp(0.0, (c.levels - 1) as f64) as usize]
            }
            Self::MovingBall(c) => {
                let bin = |v: f64| {
                    ((v * POSITION_BINS as f64).floor().max(0.0) as usize).min(POSITION_BINS - 1)
                };
                vec![bin(obs[0]), bin(obs[1]), argmax(&obs[2..2 + c.colors])]
            }
            Self::NestedFactors(c) => obs.chunks(c.cardinality).map(argmax).collect(),
        }
    }

    pub fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> Result<SequenceSample> {
        if len == 0 {
            return Err(VprError::Config("sequence length must be > 0".into()));
        }
        self.validate()?;
        let sample = match self {
            Self::Synthetic1d(c) => c.generate(rng, len),
            Self::MovingBall(c) => c.generate(rng, len),
            Self::NestedFactors(c) => c.generate(rng, len),
        };
        debug_assert!(sample.validate().is_ok());
        Ok(sample)
    }

    /// Sequence `index` of the stream identified by `seed`.
    pub fn generate_indexed(&self, seed: u64, index: u64, len: usize) -> Result<SequenceSample> {
        self.generate(
            &mut ChaCha8Rng::seed_from_u64(sequence_seed(seed, index)),
            len,
        )
    }
}

/// Bins per axis when reading Moving Ball positions as discrete factors.
pub const POSITION_BINS: usize = 4;

/// Mixes a stream seed and an index into an independent per-sequence seed.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One-hot vector of length `n` with a one at `i`.
pub(crate) fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Index of the largest entry.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}
