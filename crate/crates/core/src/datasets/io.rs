use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetConfig, SequenceSample};
use crate::error::{Result, VprError};

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub index: u64,
    pub config: DatasetConfig,
    #[serde(flatten)]
    pub sample: SequenceSample,
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| VprError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| VprError::io(path, e))?;
    }
    w.flush().map_err(|e| VprError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| VprError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VprError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        rec.sample
            .validate()
            .map_err(|e| VprError::Contract(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{NestedFactorsConfig, Synthetic1DConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let mut records = Vec::new();
        for (i, config) in [
            DatasetConfig::Synthetic1d(Synthetic1DConfig {
                noise: 0.4,
                ..Synthetic1DConfig::default()
            }),
            DatasetConfig::default(),
            DatasetConfig::NestedFactors(NestedFactorsConfig::default()),
        ]
        .into_iter()
        .enumerate()
        {
            let sample = config.generate_indexed(3, i as u64, 25).unwrap();
            records.push(DatasetRecord {
                seed: 3,
                index: i as u64,
                config,
                sample,
            });
        }
        write_dataset(&path, &records).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            let bits = |s: &SequenceSample| -> Vec<u64> {
                s.observations
                    .iter()
                    .flatten()
                    .map(|v| v.to_bits())
                    .collect()
            };
            assert_eq!(bits(&a.sample), bits(&b.sample));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupt_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ndjson");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
