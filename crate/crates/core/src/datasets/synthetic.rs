use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SequenceSample;
use crate::error::{Result, VprError};

/// Piecewise-constant scalar sequences with a jump every `jump_period` steps.
///
/// Segment values sit on `levels` evenly spaced points of `[low, high]` and
/// follow a Markov chain: at each jump the value moves to its successor
/// (next level, wrapping) with probability `successor_prob`, otherwise to a
/// uniformly chosen other level. The chain is doubly stochastic and starts
/// uniform, so every segment's marginal is uniform over the levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Synthetic1DConfig {
    pub jump_period: usize,
    /// Standard deviation of additive Gaussian observation noise.
    pub noise: f64,
    pub low: f64,
    pub high: f64,
    pub levels: usize,
    pub successor_prob: f64,
}

impl Default for Synthetic1DConfig {
    fn default() -> Self {
        Self {
            jump_period: 10,
            noise: 0.0,
            low: -1.5,
            high: 1.5,
            levels: 4,
            successor_prob: 0.9,
        }
    }
}

impl Synthetic1DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jump_period < 2 {
            return Err(VprError::Config("jump_period must be >= 2".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(VprError::Config("noise must be >= 0".into()));
        }
        if !(self.low < self.high) || self.levels < 2 {
            return Err(VprError::Config(
                "need low < high and at least 2 levels".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.successor_prob) {
            return Err(VprError::Config("successor_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn level_values(&self) -> Vec<f64> {
        let step = (self.high - self.low) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|k| self.low + step * k as f64)
            .collect()
    }

    /// Distance between neighbouring levels.
    pub fn gap(&self) -> f64 {
        (self.high - self.low) / (self.levels - 1) as f64
    }

    pub(super) fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> SequenceSample {
        let values = self.level_values();
        let k = self.levels;
        let noise = Normal::new(0.0, self.noise).expect("validated noise");
        let mut state = rng.random_range(0..k);
        let mut observations = Vec::with_capacity(len);
        let mut clean = Vec::with_capacity(len);
        let mut boundaries = Vec::new();
        for t in 0..len {
            if t > 0 && t % self.jump_period == 0 {
                state = if rng.random::<f64>() < self.successor_prob {
                    (state + 1) % k
                } else {
                    (state + rng.random_range(1..k)) % k
                };
                boundaries.push(t);
            }
            let v = values[state];
            let obs = if self.noise > 0.0 {
                v + noise.sample(rng)
            } else {
                v
            };
            observations.push(vec![obs]);
            clean.push(v);
        }
        SequenceSample {
            observations,
            boundaries: vec![boundaries],
            factor_values: vec![clean],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetConfig;
    use rand::SeedableRng;

    #[test]
    fn boundaries_every_period_excluding_end() {
        let cfg = DatasetConfig::Synthetic1d(Synthetic1DConfig::default());
        let s = cfg.generate_indexed(1, 0, 30).unwrap();
        assert_eq!(s.boundaries, vec![vec![10, 20]]);
    }

    #[test]
    fn zero_noise_segments_are_constant() {
        let cfg = Synthetic1DConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = cfg.generate(&mut rng, 60);
        for seg in s.observations.chunks(10) {
            assert!(seg.iter().all(|o| o[0] == seg[0][0]));
        }
        // Every jump changes the value.
        for w in s.observations.chunks(10).collect::<Vec<_>>().windows(2) {
            assert_ne!(w[0][0][0], w[1][0][0]);
        }
    }

    #[test]
    fn segment_values_are_uniform_over_levels() {
        // Chi-square goodness of fit over 4 levels (3 dof); 16.27 is the 0.999 quantile.
        let cfg = Synthetic1DConfig::default();
        let levels = cfg.level_values();
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n_seq = 2000;
        for _ in 0..n_seq {
            let s = cfg.generate(&mut rng, 50);
            for seg in s.factor_values[0].chunks(10) {
                let k = levels.iter().position(|&v| v == seg[0]).unwrap();
                counts[k] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn noise_is_additive() {
        let cfg = Synthetic1DConfig {
            noise: 0.4,
            ..Synthetic1DConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = cfg.generate(&mut rng, 4000);
        let resid: Vec<f64> = s
            .observations
            .iter()
            .zip(&s.factor_values[0])
            .map(|(o, v)| o[0] - v)
            .collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        assert!((var.sqrt() - 0.4).abs() < 0.02);
    }

    #[test]
    fn validation() {
        let bad = Synthetic1DConfig {
            jump_period: 1,
            ..Synthetic1DConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = Synthetic1DConfig {
            noise: -1.0,
            ..Synthetic1DConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
