//! One-factor ablations: train and evaluate once per setting of an axis.

use std::str::FromStr;
use std::time::Instant;

use super::config::TrainConfig;
use super::infer::infer_corpus;
use super::metrics::{eval_metrics, EvalReport};
use super::train::train;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{MomentDiffModel, SpanEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Diffusion-domain scale.
    Lambda,
    /// Number of denoised spans.
    Nr,
    /// Inference steps; the model is trained once.
    Steps,
    /// Intensity embedding `on` / `off`.
    Intensity,
    /// Span embedding `fc` / `roi`.
    Embed,
    /// Weight of the similarity loss.
    Sim,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lambda" => AblationAxis::Lambda,
            "nr" => AblationAxis::Nr,
            "steps" => AblationAxis::Steps,
            "intensity" => AblationAxis::Intensity,
            "embed" => AblationAxis::Embed,
            "sim" => AblationAxis::Sim,
            other => return Err(Error::InvalidArgument(format!("unknown ablation axis {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub value: String,
    pub report: EvalReport,
    pub train_seconds: f64,
    pub infer_seconds: f64,
}

fn parse<T: FromStr>(axis: AblationAxis, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for axis {axis:?}")))
}

/// Returns `base` with the axis set to `value`.
pub fn apply(axis: AblationAxis, value: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::Lambda => cfg.model.scale = parse(axis, value)?,
        AblationAxis::Nr => cfg.model.n_spans = parse(axis, value)?,
        AblationAxis::Steps => cfg.steps = parse(axis, value)?,
        AblationAxis::Intensity => {
            cfg.model.use_intensity = match value {
                "on" | "true" => true,
                "off" | "false" => false,
                _ => return Err(Error::InvalidArgument(format!("intensity must be on or off, got {value:?}"))),
            }
        }
        AblationAxis::Embed => cfg.model.embedding = value.parse::<SpanEmbedding>()?,
        AblationAxis::Sim => cfg.loss.lambda_sim = parse(axis, value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

fn evaluate(model: &MomentDiffModel, test: &Corpus, cfg: &TrainConfig) -> Result<(EvalReport, f64)> {
    let start = Instant::now();
    let preds = infer_corpus(model, test, cfg.steps, cfg.eta, cfg.seed)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((eval_metrics(&preds, &test.annotations())?, seconds))
}

/// Trains on `train` and evaluates on `test` for every value of the axis.
pub fn run_ablation(
    train_set: &Corpus,
    test: &Corpus,
    base: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
) -> Result<Vec<AblationRun>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no ablation values given".into()));
    }
    let configs = values
        .iter()
        .map(|v| apply(axis, v, base))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::with_capacity(values.len());
    if axis == AblationAxis::Steps {
        let start = Instant::now();
        let model = train(train_set, base)?.model;
        let train_seconds = start.elapsed().as_secs_f64();
        for (value, cfg) in values.iter().zip(&configs) {
            let (report, infer_seconds) = evaluate(&model, test, cfg)?;
            runs.push(AblationRun {
                value: value.clone(),
                report,
                train_seconds,
                infer_seconds,
            });
        }
        return Ok(runs);
    }
    for (value, cfg) in values.iter().zip(&configs) {
        let start = Instant::now();
        let model = train(train_set, cfg)?.model;
        let train_seconds = start.elapsed().as_secs_f64();
        let (report, infer_seconds) = evaluate(&model, test, cfg)?;
        runs.push(AblationRun {
            value: value.clone(),
            report,
            train_seconds,
            infer_seconds,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn applies_each_axis() {
        let base = TrainConfig::default();
        assert_eq!(apply(AblationAxis::Lambda, "1.5", &base).unwrap().model.scale, 1.5);
        assert_eq!(apply(AblationAxis::Nr, "3", &base).unwrap().model.n_spans, 3);
        assert_eq!(apply(AblationAxis::Steps, "10", &base).unwrap().steps, 10);
        assert!(!apply(AblationAxis::Intensity, "off", &base).unwrap().model.use_intensity);
        assert_eq!(apply(AblationAxis::Embed, "roi", &base).unwrap().model.embedding, SpanEmbedding::Roi);
        assert_eq!(apply(AblationAxis::Sim, "0", &base).unwrap().loss.lambda_sim, 0.0);
        assert!(apply(AblationAxis::Nr, "x", &base).is_err());
        assert!(apply(AblationAxis::Steps, "0", &base).is_err());
        assert!("speed".parse::<AblationAxis>().is_err());
    }
}
