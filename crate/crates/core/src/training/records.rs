//! JSON-lines result store, config hashing and summary CSV.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, TrainError};

/// One scalar outcome. Wall-clock time lives in a separate timing file so
/// that record files stay byte-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Cell coordinates such as `alpha`, `r`, `m_h`, `model`, `dataset`.
    pub labels: BTreeMap<String, String>,
    pub metric: String,
    /// Non-finite values are written as `null` and read back as NaN.
    #[serde(deserialize_with = "null_as_nan")]
    pub value: f64,
}

fn null_as_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl ExperimentRecord {
    pub fn new(experiment: &str, config_hash: &str, seed: Option<u64>, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            config_hash: config_hash.into(),
            seed,
            labels: BTreeMap::new(),
            metric: metric.into(),
            value,
        }
    }

    pub fn label(mut self, key: &str, value: impl ToString) -> Self {
        self.labels.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingRecord {
    pub experiment: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub labels: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

/// Lower-case hex SHA-256 of the compact JSON serialization of `config`.
/// Struct fields serialize in declaration order, so the hash is stable.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_lines<T: Serialize>(path: &Path, items: &[T], append: bool) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Appends records, one JSON object per line.
pub fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    write_lines(path, records, true)
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    write_lines(path, records, false)
}

pub fn append_timings(path: &Path, timings: &[TimingRecord]) -> Result<()> {
    write_lines(path, timings, true)
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| TrainError::Records(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "experiment",
    "alpha",
    "r",
    "m_h",
    "seed",
    "train_mse",
    "test_mse",
    "slope",
    "agreement",
];

/// One row per (experiment, labels, seed) group. Cells a group lacks are
/// left empty.
pub fn summary_rows(records: &[ExperimentRecord]) -> Vec<[String; 9]> {
    let mut groups: BTreeMap<(String, Vec<(String, String)>, Option<u64>), Vec<&ExperimentRecord>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        let key = (
            r.experiment.clone(),
            r.labels.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            r.seed,
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let label = |k: &str| group[0].get(k).unwrap_or("").to_string();
            let metric = |m: &str| {
                group
                    .iter()
                    .rev()
                    .find(|r| r.metric == m)
                    .map(|r| format!("{:e}", r.value))
                    .unwrap_or_default()
            };
            [
                key.0.clone(),
                label("alpha"),
                label("r"),
                label("m_h"),
                key.2.map(|s| s.to_string()).unwrap_or_default(),
                metric("train_mse"),
                metric("test_mse"),
                metric("slope"),
                metric("agreement"),
            ]
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Records(e.to_string()))?;
    w.write_record(SUMMARY_COLUMNS).map_err(|e| TrainError::Records(e.to_string()))?;
    for row in summary_rows(records) {
        w.write_record(&row).map_err(|e| TrainError::Records(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
