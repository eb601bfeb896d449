//! Ground-truth moment records and their delimited text form.
//!
//! The annotation file is tab-separated with a header row:
//!
//! ```text
//! video_id  query_id  duration_s  start_s  end_s  [partition]
//! ```
//!
//! A query with several ground-truth moments spans several consecutive
//! records sharing `video_id` and `query_id`. The optional `partition`
//! column (`train` or `test`) assigns the record to a split pool.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spans::Span;

/// Which pool a record is drawn from when building anti-bias splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            other => Err(Error::InvalidArgument(format!("unknown partition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentAnnotation {
    pub video_id: String,
    pub query_id: String,
    pub duration_s: f64,
    /// Normalized ground truth, derived from `raw_gt_s / duration_s`.
    pub gt: Vec<Span>,
    pub raw_gt_s: Vec<(f64, f64)>,
    pub partition: Option<Partition>,
}

impl MomentAnnotation {
    pub fn new(
        video_id: impl Into<String>,
        query_id: impl Into<String>,
        duration_s: f64,
        raw_gt_s: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if !(duration_s.is_finite() && duration_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "query {query_id}: duration must be positive, got {duration_s}"
            )));
        }
        if raw_gt_s.is_empty() {
            return Err(Error::InvalidArgument(format!("query {query_id}: no ground-truth moment")));
        }
        let mut gt = Vec::with_capacity(raw_gt_s.len());
        for &(start, end) in &raw_gt_s {
            if !(0.0 <= start && start < end && end <= duration_s) {
                return Err(Error::InvalidSpan(format!(
                    "query {query_id}: moment [{start}, {end}] s outside a {duration_s} s video"
                )));
            }
            let span = Span::from_interval(start / duration_s, end / duration_s)?.clamp_to_video();
            span.validate()?;
            gt.push(span);
        }
        Ok(MomentAnnotation {
            video_id: video_id.into(),
            query_id,
            duration_s,
            gt,
            raw_gt_s,
            partition: None,
        })
    }

    pub fn with_partition(mut self, partition: Option<Partition>) -> Self {
        self.partition = partition;
        self
    }

    /// The moment split rules are evaluated on: the first listed one.
    pub fn primary_s(&self) -> (f64, f64) {
        self.raw_gt_s[0]
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.video_id, &self.query_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    video_id: String,
    query_id: String,
    duration_s: f64,
    start_s: f64,
    end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<Partition>,
}

pub fn write_annotations(path: &Path, annotations: &[MomentAnnotation]) -> Result<()> {
    let with_partition = annotations.iter().any(|a| a.partition.is_some());
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut header = vec!["video_id", "query_id", "duration_s", "start_s", "end_s"];
    if with_partition {
        header.push("partition");
    }
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    for a in annotations {
        for &(start, end) in &a.raw_gt_s {
            let mut row = vec![
                a.video_id.clone(),
                a.query_id.clone(),
                a.duration_s.to_string(),
                start.to_string(),
                end.to_string(),
            ];
            if with_partition {
                row.push(a.partition.map(|p| p.to_string()).unwrap_or_default());
            }
            w.write_record(&row).map_err(|e| Error::parse(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<MomentAnnotation>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut out: Vec<MomentAnnotation> = Vec::new();
    for (line, row) in r.deserialize::<Record>().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        let at = |e: Error| Error::parse(path, format!("record {}: {e}", line + 1));
        match out.last_mut() {
            Some(prev) if prev.video_id == row.video_id && prev.query_id == row.query_id => {
                if prev.duration_s != row.duration_s || prev.partition != row.partition {
                    return Err(at(Error::InvalidArgument(
                        "records of one query disagree on duration or partition".into(),
                    )));
                }
                let mut raw = prev.raw_gt_s.clone();
                raw.push((row.start_s, row.end_s));
                *prev = MomentAnnotation::new(prev.video_id.clone(), prev.query_id.clone(), prev.duration_s, raw)
                    .map_err(at)?
                    .with_partition(row.partition);
            }
            _ => {
                let a = MomentAnnotation::new(row.video_id, row.query_id, row.duration_s, vec![(row.start_s, row.end_s)])
                    .map_err(at)?
                    .with_partition(row.partition);
                out.push(a);
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for a in &out {
        if !seen.insert(a.key()) {
            return Err(Error::parse(
                path,
                format!("query {}/{} appears in non-consecutive records", a.video_id, a.query_id),
            ));
        }
    }
    Ok(out)
}
