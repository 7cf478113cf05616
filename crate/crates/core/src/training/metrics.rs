//! Metric records and their CSV form.
//!
//! Floats print in Rust's shortest round-trip form, so two logs are equal
//! as text exactly when every value is equal bit for bit.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::Phase;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "phase,epoch,step,loss,accuracy";

/// One optimizer step, or an epoch summary when `step` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: Option<usize>,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

impl MetricRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.phase,
            self.epoch,
            opt(self.step.map(|s| s.to_string())),
            self.loss,
            opt(self.accuracy.map(|a| a.to_string()))
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, r: MetricRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }

    /// Appends the records to `path`, writing the header if the file is new
    /// or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        for r in &self.records {
            let _ = writeln!(text, "{}", r.csv_line());
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Epoch summaries of `phase`, in order.
    pub fn epochs(&self, phase: Phase) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.phase == phase && r.step.is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut log = MetricLog::default();
        log.push(MetricRecord {
            phase: Phase::Pretrain,
            epoch: 1,
            step: Some(3),
            loss: 0.1 + 0.2,
            accuracy: Some(0.5),
        });
        log.push(MetricRecord {
            phase: Phase::Selector,
            epoch: 2,
            step: None,
            loss: 1.0,
            accuracy: None,
        });
        assert_eq!(
            log.to_csv(),
            "phase,epoch,step,loss,accuracy\npretrain,1,3,0.30000000000000004,0.5\nselector,2,,1,\n"
        );
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricLog::default();
        log.push(MetricRecord {
            phase: Phase::Dense,
            epoch: 1,
            step: Some(1),
            loss: 2.0,
            accuracy: None,
        });
        log.append_csv(&p).unwrap();
        log.append_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("phase,").count(), 1);
        assert_eq!(text.lines().count(), 3);
    }
}
