use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{one_hot, SequenceSample};
use crate::error::{Result, VprError};

/// Index of the colour factor in [`SequenceSample::factor_values`].
pub const COLOR_FACTOR: usize = 2;

/// How a new colour is chosen when the ball changes colour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recolor {
    /// Next colour in a fixed cyclic order.
    #[default]
    Cycle,
    /// Uniformly among the other colours.
    Random,
}

/// A ball bouncing in a square box. The colour changes on every wall
/// bounce and otherwise with probability `recolor_prob` per step.
///
/// Observations are `(x / L, y / L)` followed by a one-hot colour, so every
/// feature lies in `[0, 1]`. Factors are `x`, `y` and the colour index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MovingBallConfig {
    pub box_size: f64,
    pub speed: f64,
    pub colors: usize,
    pub recolor_prob: f64,
    pub recolor: Recolor,
    /// Fixed heading in radians. Random when absent.
    pub heading: Option<f64>,
}

impl Default for MovingBallConfig {
    fn default() -> Self {
        Self {
            box_size: 1.0,
            speed: 0.1,
            colors: 4,
            recolor_prob: 0.1,
            recolor: Recolor::Cycle,
            heading: None,
        }
    }
}

impl MovingBallConfig {
    pub fn slow() -> Self {
        Self {
            speed: 0.04,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.box_size > 0.0 && self.box_size.is_finite()) {
            return Err(VprError::Config("box_size must be > 0".into()));
        }
        if !(self.speed >= 0.0 && self.speed < self.box_size) {
            return Err(VprError::Config("speed must lie in [0, box_size)".into()));
        }
        if self.colors < 2 {
            return Err(VprError::Config("need at least 2 colours".into()));
        }
        if !(0.0..=1.0).contains(&self.recolor_prob) {
            return Err(VprError::Config("recolor_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        2 + self.colors
    }

    fn next_color(&self, rng: &mut ChaCha8Rng, color: usize) -> usize {
        match self.recolor {
            Recolor::Cycle => (color + 1) % self.colors,
            Recolor::Random => (color + rng.random_range(1..self.colors)) % self.colors,
        }
    }

    pub(super) fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> SequenceSample {
        let l = self.box_size;
        let mut x = rng.random::<f64>() * l;
        let mut y = rng.random::<f64>() * l;
        let heading = self.heading.unwrap_or_else(|| rng.random::<f64>() * TAU);
        let mut vx = self.speed * heading.cos();
        let mut vy = self.speed * heading.sin();
        let mut color = rng.random_range(0..self.colors);

        let mut observations = Vec::with_capacity(len);
        let mut values = vec![Vec::with_capacity(len); 3];
        let mut position_bounds = Vec::new();
        let mut color_bounds = Vec::new();
        for t in 0..len {
            if t > 0 {
                let bx = reflect(&mut x, &mut vx, l);
                let by = reflect(&mut y, &mut vy, l);
                if self.speed > 0.0 {
                    position_bounds.push(t);
                }
                // Draw the random recolour every step so the stream does not
                // depend on whether a bounce happened.
                let spontaneous = rng.random::<f64>() < self.recolor_prob;
                if bx || by || spontaneous {
                    color = self.next_color(rng, color);
                    color_bounds.push(t);
                }
            }
            let mut obs = vec![x / l, y / l];
            obs.extend(one_hot(color, self.colors));
            observations.push(obs);
            values[0].push(x);
            values[1].push(y);
            values[2].push(color as f64);
        }
        SequenceSample {
            observations,
            boundaries: vec![position_bounds.clone(), position_bounds, color_bounds],
            factor_values: values,
        }
    }
}

/// Advances one coordinate and reflects it off the walls of `[0, l]`.
/// Returns whether a bounce happened.
fn reflect(p: &mut f64, v: &mut f64, l: f64) -> bool {
    *p += *v;
    if *p < 0.0 {
        *p = -*p;
        *v = -*v;
        true
    } else if *p > l {
        *p = 2.0 * l - *p;
        *v = -*v;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Bounce steps of a 1-D unfolded trajectory `x0 + v t`, found by
    /// counting how many wall lines `k L` have been crossed.
    fn unfolded_bounces(x0: f64, v: f64, l: f64, len: usize) -> Vec<usize> {
        let walls = |t: usize| ((x0 + v * t as f64) / l).floor();
        (1..len).filter(|&t| walls(t) != walls(t - 1)).collect()
    }

    #[test]
    fn deterministic_colour_changes_match_kinematics() {
        for (seed, heading) in [(1u64, 0.0), (2, std::f64::consts::PI), (3, 0.0)] {
            let cfg = MovingBallConfig {
                recolor_prob: 0.0,
                speed: 0.13,
                heading: Some(heading),
                ..MovingBallConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = cfg.generate(&mut rng, 60);
            let x0 = s.factor_values[0][0];
            let v = 0.13 * heading.cos();
            let expected = unfolded_bounces(x0, v, 1.0, 60);
            assert!(!expected.is_empty());
            assert_eq!(s.boundaries[COLOR_FACTOR], expected);
        }
    }

    #[test]
    fn stationary_ball_has_geometric_colour_gaps() {
        let cfg = MovingBallConfig {
            speed: 0.0,
            recolor_prob: 0.2,
            ..MovingBallConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = cfg.generate(&mut rng, 20_000);
        assert!(s.boundaries[0].is_empty());
        let b = &s.boundaries[COLOR_FACTOR];
        let mean_gap = (b[b.len() - 1] - b[0]) as f64 / (b.len() - 1) as f64;
        assert!((mean_gap - 5.0).abs() < 0.25, "mean gap {mean_gap}");
    }

    #[test]
    fn cycle_policy_is_deterministic() {
        let cfg = MovingBallConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = cfg.generate(&mut rng, 200);
        let c = &s.factor_values[COLOR_FACTOR];
        for &t in &s.boundaries[COLOR_FACTOR] {
            assert_eq!(c[t] as usize, (c[t - 1] as usize + 1) % 4);
        }
    }

    #[test]
    fn random_policy_always_changes_colour() {
        let cfg = MovingBallConfig {
            recolor: Recolor::Random,
            ..MovingBallConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = cfg.generate(&mut rng, 500);
        let c = &s.factor_values[COLOR_FACTOR];
        for t in 1..500 {
            let changed = c[t] != c[t - 1];
            assert_eq!(changed, s.boundaries[COLOR_FACTOR].contains(&t));
        }
    }

    #[test]
    fn observations_are_unit_range() {
        let cfg = MovingBallConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = cfg.generate(&mut rng, 300);
        assert!(s
            .observations
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.obs_dim(), 6);
    }
}
