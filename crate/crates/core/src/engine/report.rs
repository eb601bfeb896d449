//! Text records for predictions and evaluation results.
//!
//! * Predictions: tab-separated `query_id rank center width start end confidence`,
//!   one row per span, `rank` 0 being the highest confidence.
//! * Metric report: one `name threshold value` row per metric, `-` for the
//!   threshold of `MAP_avg`.
//! * Histogram table: per-query ground-truth and top-1 positions and widths
//!   for plotting their distributions.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{rank_by_confidence, EvalReport};
use crate::denoiser::PredictionSet;
use crate::error::{Error, Result};
use crate::spans::Span;

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    query_id: String,
    rank: usize,
    center: f64,
    width: f64,
    start: f64,
    end: f64,
    confidence: f64,
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::parse(path, e))
}

pub fn write_predictions(path: &Path, preds: &[(String, PredictionSet)]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    for (id, p) in preds {
        for (rank, &i) in rank_by_confidence(p).iter().enumerate() {
            let s = p.spans[i];
            w.serialize(PredictionRow {
                query_id: id.clone(),
                rank,
                center: s.center,
                width: s.width,
                start: s.start(),
                end: s.end(),
                confidence: p.confidence[i],
            })
            .map_err(|e| Error::parse(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads predictions back; spans of a query are returned in rank order.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, PredictionSet)>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let mut out: Vec<(String, Vec<PredictionRow>)> = Vec::new();
    for row in r.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        match out.last_mut() {
            Some((id, rows)) if *id == row.query_id => rows.push(row),
            _ => out.push((row.query_id.clone(), vec![row])),
        }
    }
    Ok(out
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by_key(|r| r.rank);
            let set = PredictionSet {
                spans: rows.iter().map(|r| Span::new(r.center, r.width)).collect(),
                confidence: rows.iter().map(|r| r.confidence).collect(),
            };
            (id, set)
        })
        .collect())
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    for &(t, v) in &report.r1 {
        s.push_str(&format!("R1\t{t:.2}\t{v:.4}\n"));
    }
    for &(t, v) in &report.map_at {
        s.push_str(&format!("MAP\t{t:.2}\t{v:.4}\n"));
    }
    s.push_str(&format!("MAP_avg\t-\t{:.4}\n", report.map_avg));
    s
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, format_report(report)).map_err(|e| Error::io(path, e))
}

pub fn write_histogram_table(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "query_id\tgt_center\tgt_width\tpred_center\tpred_width\ttop1_iou").map_err(io)?;
    for r in &report.records {
        let g = r.gt[0];
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.query_id, g.center, g.width, r.top1.center, r.top1.width, r.top1_iou
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
