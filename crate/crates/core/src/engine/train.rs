//! Mini-batch training of the full network.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{clip_global_norm, AdamW};
use crate::condition::{build_fusion, build_scores, default_pair_count, similarity_loss, ConditionBatch, FrameFeatures, QueryFeatures, SimilarityLabels};
use crate::data::Corpus;
use crate::denoiser::{build_denoiser, read_predictions, DenoiseBatch};
use crate::diffusion::{sample_intensity, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MomentDiffModel};
use crate::nn::Session;
use crate::objective::{pad_inputs, total_loss, vmr_loss, LossWeights};
use crate::spans::Span;

/// Mean losses over one epoch (or one batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub sim: f64,
    pub vmr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MomentDiffModel,
    pub history: Vec<EpochStats>,
}

/// Batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub sim: f64,
    pub vmr: f64,
}

/// One sample ready for the network.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub video: FrameFeatures,
    pub query: QueryFeatures,
    pub gt: Vec<Span>,
}

impl TrainItem {
    pub fn from_corpus(corpus: &Corpus, i: usize) -> Self {
        TrainItem {
            video: corpus.frame_features(i),
            query: corpus.query_features(i),
            gt: corpus.samples[i].annotation.gt.clone(),
        }
    }
}

/// Model configuration with feature widths taken from the corpus.
pub fn model_config_for(corpus: &Corpus, base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        d_video: corpus.d_video(),
        d_text: corpus.d_text(),
        max_text_len: base.max_text_len.max(corpus.n_tokens()),
        ..base.clone()
    }
}

pub fn schedule_for(cfg: &ModelConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(cfg.intensities, DEFAULT_COSINE_OFFSET)
}

/// Loss of one batch and its gradient for every parameter.
///
/// Randomness (intensities, noise, padding order, hinge pairs) is drawn
/// from `rng` in a fixed order that does not depend on parameter values,
/// so re-running with an identically seeded stream evaluates the same
/// objective at different parameters.
pub fn loss_and_gradients<R: Rng + ?Sized>(
    model: &MomentDiffModel,
    schedule: &NoiseSchedule,
    items: &[&TrainItem],
    weights: &LossWeights,
    margin: f64,
    rng: &mut R,
) -> Result<(BatchLoss, BTreeMap<String, Array2<f64>>)> {
    let cfg = &model.config;
    let pairs: Vec<(&FrameFeatures, &QueryFeatures)> = items.iter().map(|it| (&it.video, &it.query)).collect();
    let cond = ConditionBatch::new(&pairs, cfg)?;
    let (groups, frames, n_r) = (items.len(), cond.frames, cfg.n_spans);

    let mut spans = Array2::zeros((groups * n_r, 2));
    let mut intensities = Vec::with_capacity(groups);
    for (b, item) in items.iter().enumerate() {
        let m = sample_intensity(cfg.intensities, rng);
        let noisy = pad_inputs(&item.gt, n_r, m, schedule, cfg.scale, rng)?;
        for (j, s) in noisy.spans.iter().enumerate() {
            spans[[b * n_r + j, 0]] = s.center;
            spans[[b * n_r + j, 1]] = s.width;
        }
        intensities.push(m);
    }
    let batch = DenoiseBatch {
        groups,
        spans_per_group: n_r,
        frames,
        spans,
        intensities,
        video_mask: cond.video_mask.clone(),
        frame_counts: cond.frame_counts.clone(),
    };
    batch.validate(cfg)?;

    let mut sess = Session::new(&model.params);
    let fusion = build_fusion(&mut sess, cfg, &cond);
    let scores = build_scores(&mut sess, fusion);
    let nodes = build_denoiser(&mut sess, cfg, fusion, &batch);

    let inv = 1.0 / groups as f64;
    let mut score_seed = Array2::zeros((groups * frames, 1));
    let mut span_seed = Array2::zeros((groups * n_r, 2));
    let mut conf_seed = Array2::zeros((groups * n_r, 1));
    let (mut total, mut sim_sum, mut vmr_sum) = (0.0, 0.0, 0.0);
    for (b, item) in items.iter().enumerate() {
        let rows = b * frames..(b + 1) * frames;
        let mask = &cond.video_mask[rows.clone()];
        let s: Vec<f64> = rows.clone().map(|r| sess.value(scores)[[r, 0]]).collect();
        let labels = SimilarityLabels::from_spans(&item.gt, mask);
        let n_pairs = default_pair_count(&labels, mask);
        let sim = similarity_loss(&s, &labels, mask, n_pairs, margin, rng)?;
        let preds = read_predictions(&sess, &nodes, b, n_r);
        let finite = preds.spans.iter().all(|s| s.center.is_finite() && s.width.is_finite())
            && preds.confidence.iter().all(|z| z.is_finite());
        if !finite {
            // Matching is undefined on NaN costs; let the caller report the state.
            let loss = BatchLoss {
                total: f64::NAN,
                sim: sim.value,
                vmr: f64::NAN,
            };
            return Ok((loss, BTreeMap::new()));
        }
        let vmr = vmr_loss(&preds, &item.gt, weights)?;
        total += total_loss(sim.value, vmr.value, weights);
        sim_sum += sim.value;
        vmr_sum += vmr.value;
        for (i, g) in sim.grad.iter().enumerate() {
            score_seed[[b * frames + i, 0]] = weights.lambda_sim * g * inv;
        }
        for j in 0..n_r {
            span_seed[[b * n_r + j, 0]] = vmr.span_grad[j][0] * inv;
            span_seed[[b * n_r + j, 1]] = vmr.span_grad[j][1] * inv;
            conf_seed[[b * n_r + j, 0]] = vmr.confidence_grad[j] * inv;
        }
    }
    let mut grads = sess
        .graph
        .backward(vec![(scores, score_seed), (nodes.spans, span_seed), (nodes.confidence, conf_seed)]);
    let loss = BatchLoss {
        total: total * inv,
        sim: sim_sum * inv,
        vmr: vmr_sum * inv,
    };
    Ok((loss, sess.param_grads(&mut grads)))
}

fn non_finite_report(
    model: &MomentDiffModel,
    loss: &BatchLoss,
    grads: &BTreeMap<String, Array2<f64>>,
    lr: f64,
) -> String {
    let bad_grads: Vec<&str> = grads
        .iter()
        .filter(|(_, g)| g.iter().any(|x| !x.is_finite()))
        .map(|(n, _)| n.as_str())
        .collect();
    let max_param = model
        .params
        .iter()
        .flat_map(|(_, p)| p.iter().copied())
        .fold(0.0f64, |a, x| a.max(x.abs()));
    format!(
        "loss {:?} (sim {:?}, vmr {:?}); non-finite gradients in {:?}; max |param| {max_param:e}; learning rate {lr:e}",
        loss.total, loss.sim, loss.vmr, bad_grads
    )
}

/// Trains on every sample of `corpus`.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(corpus, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(corpus: &Corpus, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty corpus".into()));
    }
    let model_cfg = model_config_for(corpus, &cfg.model);
    let mut model = MomentDiffModel::new(model_cfg, cfg.seed)?;
    let schedule = schedule_for(&model.config)?;
    let items: Vec<TrainItem> = (0..corpus.len()).map(|i| TrainItem::from_corpus(corpus, i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * items.len().div_ceil(cfg.batch_size);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sim, mut vmr, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, mut grads) = loss_and_gradients(&model, &schedule, &batch, &cfg.loss, cfg.margin, &mut rng)?;
            let finite = loss.total.is_finite() && grads.values().all(|g| g.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: non_finite_report(&model, &loss, &grads, cfg.learning_rate),
                });
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.learning_rate = cfg.learning_rate * cfg.lr_schedule.factor(global_step, total_steps, cfg.warmup_steps);
            opt.step(&mut model.params, &grads);
            global_step += 1;
            sum += loss.total;
            sim += loss.sim;
            vmr += loss.vmr;
            steps += 1;
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            loss: sum / n,
            sim: sim / n,
            vmr: vmr / n,
            steps,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutput { model, history })
}
