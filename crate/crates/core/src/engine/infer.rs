//! DDIM inference from random spans.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::schedule_for;
use crate::condition::{build_fusion, ConditionBatch, FrameFeatures, QueryFeatures};
use crate::data::Corpus;
use crate::denoiser::{build_denoiser, read_predictions, DenoiseBatch, PredictionSet};
use crate::diffusion::{ddim_step, intensity_ladder, NoiseDraw};
use crate::error::{Error, Result};
use crate::model::MomentDiffModel;
use crate::nn::Session;
use crate::spans::{scale_down, scale_up, ScaledSpan, Span};

/// Queries denoised together by [`infer_corpus`].
pub const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub predictions: PredictionSet,
    pub top1: Span,
}

/// Retrieves moments for one query.
pub fn infer(
    model: &MomentDiffModel,
    video: &FrameFeatures,
    query: &QueryFeatures,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Inference> {
    let predictions = infer_batch(model, &[(video, query)], steps, eta, seed, 0)?.remove(0);
    let (_, top1) = predictions.top1().expect("at least one span");
    Ok(Inference { predictions, top1 })
}

/// Retrieves moments for several queries at once.
///
/// Query `b` draws its initial spans and DDIM noise from random stream
/// `first_stream + b` of `seed`, so results do not depend on how queries
/// are grouped into batches.
pub fn infer_batch(
    model: &MomentDiffModel,
    samples: &[(&FrameFeatures, &QueryFeatures)],
    steps: usize,
    eta: f64,
    seed: u64,
    first_stream: u64,
) -> Result<Vec<PredictionSet>> {
    let cfg = &model.config;
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be non-negative, got {eta}")));
    }
    let ladder = intensity_ladder(cfg.intensities, steps)?;
    let schedule = schedule_for(cfg)?;
    let cond = ConditionBatch::new(samples, cfg)?;
    let fusion = {
        let mut sess = Session::new(&model.params);
        let f = build_fusion(&mut sess, cfg, &cond);
        sess.value(f).clone()
    };

    let (groups, n_r) = (samples.len(), cfg.n_spans);
    let mut rngs: Vec<ChaCha8Rng> = (0..groups)
        .map(|b| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(first_stream + b as u64);
            r
        })
        .collect();
    let mut x: Vec<ScaledSpan> = (0..groups * n_r)
        .map(|i| {
            let e = NoiseDraw::sample(&mut rngs[i / n_r]);
            ScaledSpan {
                center: e.center,
                width: e.width,
            }
        })
        .collect();

    for (k, &m) in ladder.iter().enumerate() {
        let mut spans = Array2::zeros((groups * n_r, 2));
        for (i, xi) in x.iter().enumerate() {
            let s = scale_down(*xi, cfg.scale);
            spans[[i, 0]] = s.center;
            spans[[i, 1]] = s.width;
        }
        let batch = DenoiseBatch {
            groups,
            spans_per_group: n_r,
            frames: cond.frames,
            spans,
            intensities: vec![m; groups],
            video_mask: cond.video_mask.clone(),
            frame_counts: cond.frame_counts.clone(),
        };
        batch.validate(cfg)?;
        let mut sess = Session::new(&model.params);
        let f = sess.input(fusion.clone());
        let nodes = build_denoiser(&mut sess, cfg, f, &batch);
        let preds: Vec<PredictionSet> = (0..groups).map(|b| read_predictions(&sess, &nodes, b, n_r)).collect();

        let Some(&m_prev) = ladder.get(k + 1) else {
            return Ok(preds
                .into_iter()
                .map(|p| PredictionSet {
                    spans: p.spans.iter().map(Span::clamp_to_video).collect(),
                    confidence: p.confidence,
                })
                .collect());
        };
        for (i, xi) in x.iter_mut().enumerate() {
            let x0 = scale_up(preds[i / n_r].spans[i % n_r], cfg.scale);
            let eps = NoiseDraw::sample(&mut rngs[i / n_r]);
            *xi = ddim_step(*xi, x0, m, m_prev, &schedule, eta, eps)?;
        }
    }
    unreachable!("ladder is non-empty")
}

/// Predictions for every sample of a corpus, in corpus order.
pub fn infer_corpus(model: &MomentDiffModel, corpus: &Corpus, steps: usize, eta: f64, seed: u64) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::with_capacity(corpus.len());
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for chunk in indices.chunks(INFER_CHUNK) {
        let feats: Vec<(FrameFeatures, QueryFeatures)> = chunk
            .iter()
            .map(|&i| (corpus.frame_features(i), corpus.query_features(i)))
            .collect();
        let refs: Vec<(&FrameFeatures, &QueryFeatures)> = feats.iter().map(|(v, q)| (v, q)).collect();
        out.extend(infer_batch(model, &refs, steps, eta, seed, chunk[0] as u64)?);
    }
    Ok(out)
}
