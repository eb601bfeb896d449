//! Recall at top-1 and mean average precision over IoU thresholds.

use crate::data::MomentAnnotation;
use crate::denoiser::PredictionSet;
use crate::error::{Error, Result};
use crate::spans::{iou, Span};

pub const R1_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const MAP_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub gt: Vec<Span>,
    pub top1: Span,
    pub top1_confidence: f64,
    /// Best IoU of the top-1 span against any ground truth.
    pub top1_iou: f64,
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub r1: Vec<(f64, f64)>,
    pub map_at: Vec<(f64, f64)>,
    pub map_avg: f64,
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn r1_at(&self, threshold: f64) -> Option<f64> {
        lookup(&self.r1, threshold)
    }

    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        lookup(&self.map_at, threshold)
    }
}

fn lookup(table: &[(f64, f64)], threshold: f64) -> Option<f64> {
    table.iter().find(|(t, _)| (t - threshold).abs() < 1e-9).map(|&(_, v)| v)
}

/// Prediction order by confidence, highest first; ties keep index order.
pub fn rank_by_confidence(preds: &PredictionSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.confidence[b].total_cmp(&preds.confidence[a]));
    order
}

/// Average precision of one ranked prediction list: every prediction is a
/// hit when its IoU exceeds `threshold` with a ground truth not yet taken
/// by a higher-ranked hit (the best-overlapping such ground truth is taken).
pub fn average_precision(preds: &PredictionSet, gts: &[Span], threshold: f64) -> f64 {
    let mut taken = vec![false; gts.len()];
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &p) in rank_by_confidence(preds).iter().enumerate() {
        let span = preds.spans[p].clamp_to_video();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let o = iou(&span, gt);
            if !taken[g] && o > threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / gts.len() as f64
}

pub fn eval_metrics(preds: &[PredictionSet], annotations: &[MomentAnnotation]) -> Result<EvalReport> {
    eval_metrics_at(preds, annotations, &R1_THRESHOLDS)
}

/// [`eval_metrics`] with custom recall thresholds.
pub fn eval_metrics_at(preds: &[PredictionSet], annotations: &[MomentAnnotation], r1_thresholds: &[f64]) -> Result<EvalReport> {
    if preds.len() != annotations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction sets for {} annotated queries",
            preds.len(),
            annotations.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut records = Vec::with_capacity(preds.len());
    for (p, a) in preds.iter().zip(annotations) {
        if p.is_empty() || p.spans.len() != p.confidence.len() {
            return Err(Error::Shape(format!("query {}: malformed prediction set", a.query_id)));
        }
        let (idx, top) = p.top1().expect("non-empty");
        let top = top.clamp_to_video();
        let top1_iou = a.gt.iter().map(|g| iou(&top, g)).fold(0.0, f64::max);
        records.push(QueryRecord {
            query_id: a.query_id.clone(),
            gt: a.gt.clone(),
            top1: top,
            top1_confidence: p.confidence[idx],
            top1_iou,
        });
    }
    let n = preds.len() as f64;
    let r1 = r1_thresholds
        .iter()
        .map(|&t| {
            let hits = records.iter().filter(|r| r.top1_iou > t).count();
            (t, 100.0 * hits as f64 / n)
        })
        .collect();
    let map_at: Vec<(f64, f64)> = MAP_THRESHOLDS
        .iter()
        .map(|&t| {
            let sum: f64 = preds.iter().zip(annotations).map(|(p, a)| average_precision(p, &a.gt, t)).sum();
            (t, 100.0 * sum / n)
        })
        .collect();
    let map_avg = map_at.iter().map(|&(_, v)| v).sum::<f64>() / map_at.len() as f64;
    Ok(EvalReport {
        r1,
        map_at,
        map_avg,
        records,
    })
}

/// Orders id-keyed predictions like `annotations`, rejecting missing,
/// extra or repeated queries.
pub fn align_predictions(preds: Vec<(String, PredictionSet)>, annotations: &[MomentAnnotation]) -> Result<Vec<PredictionSet>> {
    let mut by_id = std::collections::HashMap::with_capacity(preds.len());
    for (id, p) in preds {
        if by_id.insert(id.clone(), p).is_some() {
            return Err(Error::InvalidArgument(format!("query {id} predicted twice")));
        }
    }
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let p = by_id
            .remove(&a.query_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for query {}", a.query_id)))?;
        out.push(p);
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::InvalidArgument(format!("prediction for unannotated query {extra}")));
    }
    Ok(out)
}
