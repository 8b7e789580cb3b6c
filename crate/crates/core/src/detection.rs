//! Boundary criteria and the per-episode routing record.
//!
//! A level that receives new bottom-up input compares two KL divergences:
//! `D_st`, the belief update needed if nothing changed, and `D_ch`, the
//! update needed if the level's transition model is right that something
//! did. Criterion E fires when the predicted change explains the input
//! better (`D_st > D_ch`); criterion U fires when `D_st` spikes above
//! `gamma` times its recent moving average.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VprError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupPolicy {
    /// Average over however many values the window holds; an empty window fires.
    #[default]
    MeanOverAvailable,
    /// Criterion U stays silent until the window is full.
    SkipUntilFull,
    /// Criterion U fires on every step until the window is full.
    AlwaysDetectUntilFull,
}

/// Which criteria may open a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Criteria {
    pub expected: bool,
    pub unexpected: bool,
}

impl Default for Criteria {
    fn default() -> Self {
        Self::BOTH
    }
}

impl Criteria {
    pub const BOTH: Self = Self {
        expected: true,
        unexpected: true,
    };
    pub const EXPECTED_ONLY: Self = Self {
        expected: true,
        unexpected: false,
    };
    pub const UNEXPECTED_ONLY: Self = Self {
        expected: false,
        unexpected: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub gamma: f64,
    pub window: usize,
    pub warmup: WarmupPolicy,
    pub criteria: Criteria,
    /// Clear criterion-U windows at the start of every evaluation episode.
    pub reset_windows_per_episode: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            gamma: 1.1,
            window: 100,
            warmup: WarmupPolicy::default(),
            criteria: Criteria::default(),
            reset_windows_per_episode: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(VprError::Config(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.window == 0 {
            return Err(VprError::Config("window must be >= 1".into()));
        }
        if !self.criteria.expected && !self.criteria.unexpected {
            return Err(VprError::Config(
                "at least one criterion must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Sliding window over the most recent `D_st` values of one level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CuWindow {
    capacity: usize,
    values: VecDeque<f64>,
    sum: f64,
}

impl CuWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
            sum: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.values.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, d_st: f64) {
        if self.values.len() == self.capacity {
            if let Some(old) = self.values.pop_front() {
                self.sum -= old;
            }
        }
        self.values.push_back(d_st);
        self.sum += d_st;
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.sum = 0.0;
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            // Recomputed rather than read from the running sum so that long
            // runs do not accumulate drift.
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    /// `gamma * mean`, or `None` when the window is empty.
    pub fn threshold(&self, gamma: f64) -> Option<f64> {
        self.mean().map(|m| gamma * m)
    }
}

/// Criterion E: the change hypothesis needs a smaller belief update. Ties do not fire.
pub fn criterion_e(d_st: f64, d_ch: f64) -> bool {
    d_st > d_ch
}

/// Criterion U against the window state *before* `d_st` is pushed.
pub fn criterion_u(d_st: f64, window: &CuWindow, gamma: f64, warmup: WarmupPolicy) -> bool {
    match warmup {
        WarmupPolicy::SkipUntilFull if !window.is_full() => false,
        WarmupPolicy::AlwaysDetectUntilFull if !window.is_full() => true,
        _ => match window.threshold(gamma) {
            Some(th) => d_st > th,
            None => true,
        },
    }
}

/// Outcome of evaluating both criteria for one level at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub d_st: f64,
    pub d_ch: f64,
    pub cu_threshold: Option<f64>,
    pub fired_ce: bool,
    pub fired_cu: bool,
    pub open: bool,
}

/// Evaluates the enabled criteria, then records `d_st` in the window.
pub fn decide(d_st: f64, d_ch: f64, window: &mut CuWindow, cfg: &DetectorConfig) -> Decision {
    let fired_ce = criterion_e(d_st, d_ch);
    let fired_cu = criterion_u(d_st, window, cfg.gamma, cfg.warmup);
    let cu_threshold = window.threshold(cfg.gamma);
    window.push(d_st);
    let open = (cfg.criteria.expected && fired_ce) || (cfg.criteria.unexpected && fired_cu);
    Decision {
        d_st,
        d_ch,
        cu_threshold,
        fired_ce,
        fired_cu,
        open,
    }
}

/// Per-episode `[T][N]` record of which levels updated at each step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionMask {
    levels: usize,
    rows: Vec<Vec<bool>>,
}

impl DecisionMask {
    pub fn new(levels: usize) -> Self {
        Self {
            levels,
            rows: Vec::new(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<bool>) -> Result<()> {
        if row.len() != self.levels {
            return Err(VprError::Dimension(format!(
                "mask row has {} levels, expected {}",
                row.len(),
                self.levels
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    /// `level` is zero-based here: index 0 is the bottom level.
    pub fn get(&self, t: usize, level: usize) -> bool {
        self.rows[t][level]
    }

    /// Objective steps at which `level` updated; position `k` is subjective step `k`.
    pub fn subjective_steps(&self, level: usize) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&t| self.rows[t][level])
            .collect()
    }

    /// Number of updates `T_n` per level.
    pub fn update_counts(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|n| self.rows.iter().filter(|r| r[n]).count())
            .collect()
    }

    /// Bottom level always open and every open level has an open level below it.
    pub fn is_nested(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.first().copied().unwrap_or(true) && r.windows(2).all(|w| !w[1] || w[0]))
    }

    /// Detected boundaries for `level`: update steps excluding the forced first step.
    pub fn boundaries(&self, level: usize) -> Vec<usize> {
        self.subjective_steps(level)
            .into_iter()
            .filter(|&t| t > 0)
            .collect()
    }
}

/// One row of the boundary trace export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    pub t: usize,
    /// One-based level index.
    pub level: usize,
    pub d_st: f64,
    pub d_ch: f64,
    pub cu_threshold: Option<f64>,
    pub fired_ce: bool,
    pub fired_cu: bool,
    pub mask: bool,
}

impl TraceRecord {
    pub fn from_decision(episode: usize, t: usize, level: usize, d: &Decision) -> Self {
        Self {
            episode,
            t,
            level,
            d_st: d.d_st,
            d_ch: d.d_ch,
            cu_threshold: d.cu_threshold,
            fired_ce: d.fired_ce,
            fired_cu: d.fired_cu,
            mask: d.open,
        }
    }
}

/// Writes trace rows as CSV with the header
/// `episode,t,level,D_st,D_ch,cu_threshold,fired_CE,fired_CU,mask`.
pub fn write_trace_csv<W: Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "episode",
        "t",
        "level",
        "D_st",
        "D_ch",
        "cu_threshold",
        "fired_CE",
        "fired_CU",
        "mask",
    ])?;
    for r in records {
        w.write_record([
            r.episode.to_string(),
            r.t.to_string(),
            r.level.to_string(),
            r.d_st.to_string(),
            r.d_ch.to_string(),
            r.cu_threshold.map(|v| v.to_string()).unwrap_or_default(),
            u8::from(r.fired_ce).to_string(),
            u8::from(r.fired_cu).to_string(),
            u8::from(r.mask).to_string(),
        ])?;
    }
    w.flush().map_err(|e| VprError::io("trace", e))?;
    Ok(())
}
