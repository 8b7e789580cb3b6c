use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Result, VprError};

/// One scalar metric with the run it came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub run: String,
    pub seed: u64,
    /// FNV-1a digest of the resolved configuration.
    pub config_digest: String,
    pub metric: String,
    /// One-based level, when the metric belongs to one.
    pub level: Option<usize>,
    pub factor: Option<usize>,
    pub value: f64,
}

/// 64-bit FNV-1a of the resolved configuration's TOML text, as hex.
pub fn config_digest(config: &RunConfig) -> Result<String> {
    let text = config.to_toml_string()?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Builds records that share one run's provenance.
pub struct Recorder {
    run: String,
    seed: u64,
    digest: String,
    pub records: Vec<MetricRecord>,
}

impl Recorder {
    pub fn new(run: impl Into<String>, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            run: run.into(),
            seed: config.training.seed,
            digest: config_digest(config)?,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, metric: &str, level: Option<usize>, factor: Option<usize>, value: f64) {
        self.records.push(MetricRecord {
            run: self.run.clone(),
            seed: self.seed,
            config_digest: self.digest.clone(),
            metric: metric.to_string(),
            level,
            factor,
            value,
        });
    }
}

/// Writes serialisable rows as CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| VprError::io(path, e))
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    write_csv(path, records)
}

#[derive(Serialize)]
struct JsonReport<'a, T: Serialize> {
    config: &'a RunConfig,
    seed: u64,
    config_digest: String,
    results: &'a T,
}

/// Writes `results` together with the resolved configuration and seed.
pub fn write_report_json<T: Serialize>(path: &Path, config: &RunConfig, results: &T) -> Result<()> {
    let report = JsonReport {
        config,
        seed: config.training.seed,
        config_digest: config_digest(config)?,
        results,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(path, text).map_err(|e| VprError::io(path, e))
}
