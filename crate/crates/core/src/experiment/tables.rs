use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const EXPERTISE: &str = "expertise.csv";
pub const BOUNDARIES: &str = "boundaries.csv";
pub const FAILURES: &str = "failures.csv";

/// Expertise predictor quality for one (expert, variant, m, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseRecord {
    pub dataset: String,
    pub expert: String,
    pub variant: String,
    pub m: usize,
    pub l: usize,
    pub seed: u64,
    pub f05: f64,
    /// Share of test instances predicted correct.
    pub predicted_correct: f64,
    pub config_fp: String,
}

/// Reference accuracies for one (expert, seed). `algorithm` is empty for the rows that
/// do not depend on a deferral algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub dataset: String,
    pub expert: String,
    pub seed: u64,
    pub algorithm: String,
    pub classifier_alone: f64,
    pub expert_alone: f64,
    pub complete: Option<f64>,
    pub config_fp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub expert: String,
    pub seed: u64,
    pub m: Option<usize>,
    pub variant: String,
    pub algorithm: String,
    pub error: String,
    pub config_fp: String,
}

/// Appends rows to a CSV table, writing the header only when the file is new or empty.
pub fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Replaces a table with `rows`.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_rows(path, rows)
}

/// Reads a table; a missing file is an empty table.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64) -> FailureRecord {
        FailureRecord {
            stage: "expertise".into(),
            expert: "H60".into(),
            seed,
            m: Some(2),
            variant: "embedding-nn".into(),
            algorithm: String::new(),
            error: "boom, with a comma".into(),
            config_fp: "abc".into(),
        }
    }

    #[test]
    fn appends_keep_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t/failures.csv");
        append_rows(&path, &[record(0)]).unwrap();
        append_rows(&path, &[record(1), record(2)]).unwrap();
        append_rows::<FailureRecord>(&path, &[]).unwrap();
        let back: Vec<FailureRecord> = read_rows(&path).unwrap();
        assert_eq!(back, vec![record(0), record(1), record(2)]);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("stage,").count(), 1);
        write_rows(&path, &[record(9)]).unwrap();
        assert_eq!(read_rows::<FailureRecord>(&path).unwrap(), vec![record(9)]);
    }

    #[test]
    fn missing_table_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_rows::<FailureRecord>(&dir.path().join("none.csv")).unwrap().is_empty());
    }
}
