//! `metrics.jsonl`: one JSON object per line.
//!
//! Training lines carry `lr`, `loss_total` and `components`; evaluation lines
//! carry `split` instead. Both carry `series`, the four cross-entropy curves
//! named by [`Series`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The tracked cross-entropy curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Series {
    /// Teacher head on recalibrated [student question, teacher answer].
    RecalMixed,
    /// Teacher head on recalibrated [teacher question, teacher answer].
    RecalTeacher,
    /// Student head on student features.
    Student,
    /// Teacher head on teacher features.
    Teacher,
}

impl Series {
    pub const ALL: [Series; 4] = [Series::RecalMixed, Series::RecalTeacher, Series::Student, Series::Teacher];

    pub fn key(self) -> &'static str {
        match self {
            Series::RecalMixed => "recal_mixed_ce",
            Series::RecalTeacher => "recal_teacher_ce",
            Series::Student => "student_ce",
            Series::Teacher => "teacher_ce",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    /// Optimizer steps taken so far across all stages of the run.
    pub step: usize,
    pub stage: String,
    pub stage_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, f64>,
    #[serde(default)]
    pub series: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Seconds since the run started; null unless wall-clock recording is on.
    pub wall_time: Option<f64>,
}

pub trait MetricSink {
    fn record(&mut self, line: &MetricLine) -> Result<()>;
}

/// Keeps lines in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub lines: Vec<MetricLine>,
}

impl MetricSink for MemorySink {
    fn record(&mut self, line: &MetricLine) -> Result<()> {
        self.lines.push(line.clone());
        Ok(())
    }
}

/// Appends JSON lines to a file, flushing after each.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl MetricSink for JsonlSink {
    fn record(&mut self, line: &MetricLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Forwards every line to two sinks.
pub struct Tee<'a>(pub &'a mut dyn MetricSink, pub &'a mut dyn MetricSink);

impl MetricSink for Tee<'_> {
    fn record(&mut self, line: &MetricLine) -> Result<()> {
        self.0.record(line)?;
        self.1.record(line)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricLine>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let line = MetricLine {
            step: 3,
            stage: "stage1".into(),
            stage_step: 3,
            lr: Some(1e-4),
            loss_total: Some(1.5),
            components: BTreeMap::from([("ar_recal".into(), 1.0), ("kl_recal".into(), 0.5)]),
            series: BTreeMap::from([(Series::Teacher.key().into(), 0.1)]),
            ..Default::default()
        };
        {
            let mut sink = JsonlSink::create(&path).unwrap();
            sink.record(&line).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"step\":3,\"stage\":\"stage1\""), "{text}");
        assert!(text.contains("\"wall_time\":null"));
        assert_eq!(read_jsonl(&path).unwrap(), vec![line]);
    }

    #[test]
    fn malformed_line_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"step\":\"x\"}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Schema(_))));
    }
}
