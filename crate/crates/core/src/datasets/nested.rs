use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{one_hot, SequenceSample};
use crate::error::{Result, VprError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PeriodMode {
    /// Factor `k` changes exactly when `t` is a multiple of its period.
    Nested,
    /// Segment lengths are drawn uniformly from
    /// `[round(p (1 - jitter)), round(p (1 + jitter))]`, clamped to at least 1.
    Renewal { jitter: f64 },
}

/// Several categorical factors, each changing on its own timescale, observed
/// as concatenated one-hot vectors. Factor 0 is the fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NestedFactorsConfig {
    pub periods: Vec<usize>,
    pub cardinality: usize,
    pub period_mode: PeriodMode,
}

impl Default for NestedFactorsConfig {
    fn default() -> Self {
        Self {
            periods: vec![3, 9, 27],
            cardinality: 4,
            period_mode: PeriodMode::Nested,
        }
    }
}

impl NestedFactorsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(VprError::Config(
                "periods must be non-empty and positive".into(),
            ));
        }
        if self.cardinality < 2 {
            return Err(VprError::Config("cardinality must be >= 2".into()));
        }
        if let PeriodMode::Renewal { jitter } = self.period_mode {
            if !(0.0..1.0).contains(&jitter) {
                return Err(VprError::Config("jitter must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.periods.len() * self.cardinality
    }

    fn segment_length(&self, rng: &mut ChaCha8Rng, period: usize) -> usize {
        match self.period_mode {
            PeriodMode::Nested => period,
            PeriodMode::Renewal { jitter } => {
                let p = period as f64;
                let lo = ((p * (1.0 - jitter)).round() as usize).max(1);
                let hi = ((p * (1.0 + jitter)).round() as usize).max(lo);
                rng.random_range(lo..=hi)
            }
        }
    }

    pub(super) fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> SequenceSample {
        let c = self.cardinality;
        let f = self.periods.len();
        let mut values: Vec<usize> = (0..f).map(|_| rng.random_range(0..c)).collect();
        let mut next_change: Vec<usize> = self
            .periods
            .iter()
            .map(|&p| self.segment_length(rng, p))
            .collect();
        let mut boundaries = vec![Vec::new(); f];
        let mut factor_values = vec![Vec::with_capacity(len); f];
        let mut observations = Vec::with_capacity(len);
        for t in 0..len {
            for k in 0..f {
                if t > 0 && t == next_change[k] {
                    values[k] = (values[k] + rng.random_range(1..c)) % c;
                    boundaries[k].push(t);
                    next_change[k] = t + self.segment_length(rng, self.periods[k]);
                }
            }
            let mut obs = Vec::with_capacity(f * c);
            for k in 0..f {
                obs.extend(one_hot(values[k], c));
                factor_values[k].push(values[k] as f64);
            }
            observations.push(obs);
        }
        SequenceSample {
            observations,
            boundaries,
            factor_values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn nested_boundary_counts() {
        let cfg = NestedFactorsConfig {
            periods: vec![2, 8, 32],
            ..NestedFactorsConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = cfg.generate(&mut rng, 64);
        let counts: Vec<usize> = s.boundaries.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![31, 7, 1]);
        assert_eq!(s.boundaries[2], vec![32]);
        // Slow boundaries are also fast boundaries in nested mode.
        for k in 1..3 {
            assert!(s.boundaries[k]
                .iter()
                .all(|t| s.boundaries[k - 1].contains(t)));
        }
    }

    #[test]
    fn every_boundary_changes_its_factor() {
        let cfg = NestedFactorsConfig {
            period_mode: PeriodMode::Renewal { jitter: 0.5 },
            ..NestedFactorsConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = cfg.generate(&mut rng, 200);
        for k in 0..3 {
            for t in 1..200 {
                let changed = s.factor_values[k][t] != s.factor_values[k][t - 1];
                assert_eq!(changed, s.boundaries[k].contains(&t));
            }
        }
    }

    #[test]
    fn renewal_mean_gap_tracks_period() {
        let cfg = NestedFactorsConfig {
            periods: vec![6],
            period_mode: PeriodMode::Renewal { jitter: 0.5 },
            ..NestedFactorsConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = cfg.generate(&mut rng, 30_000);
        let b = &s.boundaries[0];
        let mean_gap = (b[b.len() - 1] - b[0]) as f64 / (b.len() - 1) as f64;
        // Uniform on {3..=9}: mean 6.
        assert!((mean_gap - 6.0).abs() < 0.1, "{mean_gap}");
    }

    #[test]
    fn observation_is_concatenated_one_hot() {
        let cfg = NestedFactorsConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = cfg.generate(&mut rng, 10);
        for (t, o) in s.observations.iter().enumerate() {
            assert_eq!(o.len(), 12);
            for k in 0..3 {
                let block = &o[k * 4..(k + 1) * 4];
                assert_eq!(block.iter().sum::<f64>(), 1.0);
                assert_eq!(block[s.factor_values[k][t] as usize], 1.0);
            }
        }
    }
}
