//! Similarity-aware condition generator.
//!
//! Video frames and query tokens are projected to a shared width `D`.
//! Two cross-attention layers let every frame read the query
//! (`softmax(Q_v K_tᵀ) V_t + Q_v`), then two self-attention layers over
//! frames produce the fusion embedding `F`. A per-frame head predicts how
//! well each frame matches the query; those scores are supervised by a
//! pointwise cross entropy plus a pairwise margin term.

use ndarray::Array2;
use rand::Rng;

use crate::denoiser::sinusoidal_embed;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MomentDiffModel};
use crate::nn::{init_mlp, ParamStore, Session};
use crate::spans::Span;
use crate::tape::{AttentionLayout, Var};

/// Default margin of the pairwise term.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Upper bound on sampled positive/negative pairs per sample.
pub const MAX_PAIRS: usize = 16;

const CROSS_LAYERS: usize = 2;
const SELF_LAYERS: usize = 2;

/// Frame features `N_v × D_v` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
}

/// Query token features `N_t × D_t` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
}

/// The fused `N_v × D` sequence that conditions the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEmbedding {
    pub values: Array2<f64>,
    pub mask: Vec<bool>,
}

/// Per-frame binary relevance labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityLabels {
    pub y: Vec<bool>,
}

fn check_masked(values: &Array2<f64>, mask: &[bool], what: &str) -> Result<()> {
    if values.nrows() == 0 {
        return Err(Error::Shape(format!("{what} has no rows")));
    }
    if mask.len() != values.nrows() {
        return Err(Error::Shape(format!(
            "{what} mask has {} entries for {} rows",
            mask.len(),
            values.nrows()
        )));
    }
    Ok(())
}

impl FrameFeatures {
    pub fn new(values: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        check_masked(&values, &mask, "video")?;
        Ok(FrameFeatures { values, mask })
    }

    /// All frames valid.
    pub fn dense(values: Array2<f64>) -> Self {
        let mask = vec![true; values.nrows()];
        FrameFeatures { values, mask }
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }
}

impl QueryFeatures {
    pub fn new(values: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        check_masked(&values, &mask, "query")?;
        Ok(QueryFeatures { values, mask })
    }

    pub fn dense(values: Array2<f64>) -> Self {
        let mask = vec![true; values.nrows()];
        QueryFeatures { values, mask }
    }

    pub fn n_tokens(&self) -> usize {
        self.values.nrows()
    }
}

impl SimilarityLabels {
    /// Frame `i` of `n` valid frames is positive when its center
    /// `(i + 0.5) / n` lies inside any of the spans. Masked frames are
    /// negative and ignored by the loss.
    pub fn from_spans(spans: &[Span], mask: &[bool]) -> Self {
        let n = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut valid_index = 0usize;
        let y = mask
            .iter()
            .map(|&ok| {
                if !ok {
                    return false;
                }
                let t = (valid_index as f64 + 0.5) / n;
                valid_index += 1;
                spans.iter().any(|s| {
                    let (a, b) = s.interval();
                    a <= t && t <= b
                })
            })
            .collect();
        SimilarityLabels { y }
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&b| b).count()
    }
}

/// Samples padded to a common frame and token count and stacked row-wise.
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    pub groups: usize,
    pub frames: usize,
    pub tokens: usize,
    pub video: Array2<f64>,
    pub video_mask: Vec<bool>,
    pub text: Array2<f64>,
    pub text_mask: Vec<bool>,
    /// Valid frame count of each sample.
    pub frame_counts: Vec<usize>,
}

impl ConditionBatch {
    pub fn new(samples: &[(&FrameFeatures, &QueryFeatures)], cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (v, q) in samples {
            check_masked(&v.values, &v.mask, "video")?;
            check_masked(&q.values, &q.mask, "query")?;
            if v.values.ncols() != cfg.d_video {
                return Err(Error::Shape(format!(
                    "video features have {} columns, model expects {}",
                    v.values.ncols(),
                    cfg.d_video
                )));
            }
            if q.values.ncols() != cfg.d_text {
                return Err(Error::Shape(format!(
                    "query features have {} columns, model expects {}",
                    q.values.ncols(),
                    cfg.d_text
                )));
            }
            if q.n_tokens() > cfg.max_text_len {
                return Err(Error::Shape(format!(
                    "query has {} tokens, limit is {}",
                    q.n_tokens(),
                    cfg.max_text_len
                )));
            }
            if !q.mask.iter().any(|&m| m) {
                return Err(Error::InvalidArgument("query has no valid token".into()));
            }
            if !v.mask.iter().any(|&m| m) {
                return Err(Error::InvalidArgument("video has no valid frame".into()));
            }
        }
        let groups = samples.len();
        let frames = samples.iter().map(|(v, _)| v.n_frames()).max().unwrap();
        let tokens = samples.iter().map(|(_, q)| q.n_tokens()).max().unwrap();
        let mut video = Array2::zeros((groups * frames, cfg.d_video));
        let mut text = Array2::zeros((groups * tokens, cfg.d_text));
        let mut video_mask = vec![false; groups * frames];
        let mut text_mask = vec![false; groups * tokens];
        let mut frame_counts = Vec::with_capacity(groups);
        for (b, (v, q)) in samples.iter().enumerate() {
            let nv = v.n_frames();
            video
                .slice_mut(ndarray::s![b * frames..b * frames + nv, ..])
                .assign(&v.values);
            video_mask[b * frames..b * frames + nv].copy_from_slice(&v.mask);
            let nt = q.n_tokens();
            text.slice_mut(ndarray::s![b * tokens..b * tokens + nt, ..])
                .assign(&q.values);
            text_mask[b * tokens..b * tokens + nt].copy_from_slice(&q.mask);
            frame_counts.push(v.mask.iter().filter(|&&m| m).count());
        }
        Ok(ConditionBatch {
            groups,
            frames,
            tokens,
            video,
            video_mask,
            text,
            text_mask,
            frame_counts,
        })
    }
}

/// Sinusoidal embedding of frame index `i` (evaluated at the frame
/// center `i + 0.5`) for every row of a padded batch.
pub(crate) fn frame_positions(groups: usize, frames: usize, dim: usize, max_period: f64) -> Array2<f64> {
    let mut out = Array2::zeros((groups * frames, dim));
    for i in 0..frames {
        let e = sinusoidal_embed(i as f64 + 0.5, dim, max_period).expect("even dim");
        for b in 0..groups {
            out.row_mut(b * frames + i)
                .assign(&ndarray::ArrayView1::from(&e));
        }
    }
    out
}

pub(crate) fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.hidden;
    init_mlp(store, "cond.video_proj", [cfg.d_video, d, d], rng);
    init_mlp(store, "cond.text_proj", [cfg.d_text, d, d], rng);
    for l in 0..CROSS_LAYERS {
        for p in ["q", "k", "v"] {
            store.init_linear(&format!("cond.cross{l}.{p}"), d, d, rng);
        }
    }
    for l in 0..SELF_LAYERS {
        for p in ["q", "k", "v"] {
            store.init_linear(&format!("cond.self{l}.{p}"), d, d, rng);
        }
    }
    init_mlp(store, "cond.sim_head", [d, d, 1], rng);
}

/// Builds `F` for a batch inside `sess`.
pub(crate) fn build_fusion(sess: &mut Session<'_>, cfg: &ModelConfig, batch: &ConditionBatch) -> Var {
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let video = sess.input(batch.video.clone());
    let text = sess.input(batch.text.clone());
    let mut x = sess.mlp("cond.video_proj", video);
    let t = sess.mlp("cond.text_proj", text);

    for l in 0..CROSS_LAYERS {
        let q = sess.linear(&format!("cond.cross{l}.q"), x);
        let k = sess.linear(&format!("cond.cross{l}.k"), t);
        let v = sess.linear(&format!("cond.cross{l}.v"), t);
        let layout = AttentionLayout {
            groups: batch.groups,
            queries: batch.frames,
            keys: batch.tokens,
            heads: cfg.heads,
            key_mask: batch.text_mask.clone(),
        };
        let a = sess.graph.attention(q, k, v, layout, scale);
        x = sess.graph.add(a, q);
    }

    if cfg.frame_position {
        let pos = frame_positions(batch.groups, batch.frames, cfg.hidden, cfg.max_period);
        let pos = sess.input(pos);
        x = sess.graph.add(x, pos);
    }

    for l in 0..SELF_LAYERS {
        let q = sess.linear(&format!("cond.self{l}.q"), x);
        let k = sess.linear(&format!("cond.self{l}.k"), x);
        let v = sess.linear(&format!("cond.self{l}.v"), x);
        let layout = AttentionLayout {
            groups: batch.groups,
            queries: batch.frames,
            keys: batch.frames,
            heads: cfg.heads,
            key_mask: batch.video_mask.clone(),
        };
        let a = sess.graph.attention(q, k, v, layout, scale);
        x = sess.graph.add(a, q);
    }
    x
}

/// Per-frame similarity probabilities, one column.
pub(crate) fn build_scores(sess: &mut Session<'_>, fusion: Var) -> Var {
    let logits = sess.mlp("cond.sim_head", fusion);
    sess.graph.sigmoid(logits)
}

/// Fuses one query into one video.
pub fn encode_fusion(video: &FrameFeatures, query: &QueryFeatures, model: &MomentDiffModel) -> Result<FusionEmbedding> {
    let batch = ConditionBatch::new(&[(video, query)], &model.config)?;
    let mut sess = Session::new(&model.params);
    let f = build_fusion(&mut sess, &model.config, &batch);
    Ok(FusionEmbedding {
        values: sess.value(f).clone(),
        mask: video.mask.clone(),
    })
}

/// Similarity score in `(0, 1)` per frame; masked frames score 0.
pub fn similarity_scores(fusion: &FusionEmbedding, model: &MomentDiffModel) -> Result<Vec<f64>> {
    if fusion.values.ncols() != model.config.hidden {
        return Err(Error::Shape(format!(
            "fusion width {} does not match hidden size {}",
            fusion.values.ncols(),
            model.config.hidden
        )));
    }
    let mut sess = Session::new(&model.params);
    let f = sess.input(fusion.values.clone());
    let s = build_scores(&mut sess, f);
    Ok(sess
        .value(s)
        .column(0)
        .iter()
        .zip(&fusion.mask)
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect())
}

/// Value of the similarity loss and its gradient with respect to the
/// scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLoss {
    pub value: f64,
    pub pointwise: f64,
    pub pairwise: f64,
    pub grad: Vec<f64>,
}

/// Number of pairs drawn by default: one per positive frame, capped at
/// [`MAX_PAIRS`], and zero when either class is missing.
pub fn default_pair_count(labels: &SimilarityLabels, mask: &[bool]) -> usize {
    let pos = labels.y.iter().zip(mask).filter(|(&y, &m)| y && m).count();
    let neg = labels.y.iter().zip(mask).filter(|(&y, &m)| !y && m).count();
    if pos == 0 || neg == 0 {
        0
    } else {
        pos.min(MAX_PAIRS)
    }
}

/// Cross entropy over valid frames plus `n_pairs` sampled hinge terms
/// `max(0, margin + s_neg - s_pos)`.
pub fn similarity_loss<R: Rng + ?Sized>(
    scores: &[f64],
    labels: &SimilarityLabels,
    mask: &[bool],
    n_pairs: usize,
    margin: f64,
    rng: &mut R,
) -> Result<SimilarityLoss> {
    if scores.len() != labels.y.len() || scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels, {} mask entries",
            scores.len(),
            labels.y.len(),
            mask.len()
        )));
    }
    let valid: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("no valid frame".into()));
    }
    let n = valid.len() as f64;
    let mut grad = vec![0.0; scores.len()];
    let mut pointwise = 0.0;
    for &i in &valid {
        let raw = scores[i];
        let s = raw.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        let inside = raw > SCORE_EPS && raw < 1.0 - SCORE_EPS;
        if labels.y[i] {
            pointwise -= s.ln();
            if inside {
                grad[i] -= 1.0 / (s * n);
            }
        } else {
            pointwise -= (1.0 - s).ln();
            if inside {
                grad[i] += 1.0 / ((1.0 - s) * n);
            }
        }
    }
    pointwise /= n;

    let mut pairwise = 0.0;
    if n_pairs > 0 {
        let pos: Vec<usize> = valid.iter().copied().filter(|&i| labels.y[i]).collect();
        let neg: Vec<usize> = valid.iter().copied().filter(|&i| !labels.y[i]).collect();
        if pos.is_empty() {
            return Err(Error::MissingFrame("positive"));
        }
        if neg.is_empty() {
            return Err(Error::MissingFrame("negative"));
        }
        let w = 1.0 / n_pairs as f64;
        for _ in 0..n_pairs {
            let p = pos[rng.random_range(0..pos.len())];
            let q = neg[rng.random_range(0..neg.len())];
            let hinge = margin + scores[q] - scores[p];
            if hinge > 0.0 {
                pairwise += hinge * w;
                grad[q] += w;
                grad[p] -= w;
            }
        }
    }
    Ok(SimilarityLoss {
        value: pointwise + pairwise,
        pointwise,
        pairwise,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_video: 6,
            d_text: 5,
            hidden: 8,
            heads: 2,
            max_text_len: 4,
            n_spans: 3,
            intensities: 100,
            ..ModelConfig::default()
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fusion_shape_contract() {
        let cfg = small_config();
        let model = MomentDiffModel::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let video = FrameFeatures::dense(random(&mut rng, 1, 6));
        let query = QueryFeatures::dense(random(&mut rng, 1, 5));
        let f = encode_fusion(&video, &query, &model).unwrap();
        assert_eq!(f.values.dim(), (1, cfg.hidden));
        assert_eq!(f.mask, vec![true]);
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        let model = MomentDiffModel::new(small_config(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let video = FrameFeatures::dense(random(&mut rng, 4, 6));
        let wrong = QueryFeatures::dense(random(&mut rng, 2, 7));
        assert!(matches!(encode_fusion(&video, &wrong, &model), Err(Error::Shape(_))));
        let masked = QueryFeatures::new(random(&mut rng, 2, 5), vec![false, false]).unwrap();
        assert!(matches!(
            encode_fusion(&video, &masked, &model),
            Err(Error::InvalidArgument(_))
        ));
        let long = QueryFeatures::dense(random(&mut rng, 5, 5));
        assert!(encode_fusion(&video, &long, &model).is_err());
    }

    #[test]
    fn single_token_cross_attention_is_value_plus_query() {
        let cfg = ModelConfig {
            heads: 1,
            ..small_config()
        };
        let mut model = MomentDiffModel::new(cfg.clone(), 5).unwrap();
        let d = cfg.hidden;
        model
            .params
            .insert("cond.cross0.v.weight", Array2::eye(d));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = ConditionBatch::new(
            &[(
                &FrameFeatures::dense(random(&mut rng, 3, 6)),
                &QueryFeatures::dense(random(&mut rng, 1, 5)),
            )],
            &cfg,
        )
        .unwrap();
        let mut sess = Session::new(&model.params);
        let video = sess.input(batch.video.clone());
        let text = sess.input(batch.text.clone());
        let x = sess.mlp("cond.video_proj", video);
        let t = sess.mlp("cond.text_proj", text);
        let q = sess.linear("cond.cross0.q", x);
        let k = sess.linear("cond.cross0.k", t);
        let v = sess.linear("cond.cross0.v", t);
        let layout = AttentionLayout {
            groups: 1,
            queries: 3,
            keys: 1,
            heads: 1,
            key_mask: vec![true],
        };
        let a = sess.graph.attention(q, k, v, layout, 0.5);
        let out = sess.graph.add(a, q);
        let vt = sess.value(t).row(0).to_owned();
        for r in 0..3 {
            for c in 0..d {
                let expected = vt[c] + sess.value(q)[[r, c]];
                assert!((sess.value(out)[[r, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padded_tokens_do_not_matter() {
        let model = MomentDiffModel::new(small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let video = FrameFeatures::dense(random(&mut rng, 5, 6));
        let tokens = random(&mut rng, 4, 5);
        let mask = vec![true, false, true, false];
        let a = encode_fusion(&video, &QueryFeatures::new(tokens.clone(), mask.clone()).unwrap(), &model).unwrap();
        // Swap the two padded tokens and scramble their contents.
        let mut permuted = tokens.clone();
        permuted.row_mut(1).assign(&tokens.row(3).mapv(|v| v * 7.0));
        permuted.row_mut(3).assign(&tokens.row(1).mapv(|v| v - 3.0));
        let b = encode_fusion(&video, &QueryFeatures::new(permuted, mask).unwrap(), &model).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn frame_permutation_without_positions_permutes_fusion() {
        let cfg = ModelConfig {
            frame_position: false,
            ..small_config()
        };
        let model = MomentDiffModel::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = random(&mut rng, 6, 6);
        let query = QueryFeatures::dense(random(&mut rng, 2, 5));
        let perm = [3, 0, 5, 1, 4, 2];
        let mut shuffled = frames.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).assign(&frames.row(src));
        }
        let a = encode_fusion(&FrameFeatures::dense(frames), &query, &model).unwrap();
        let b = encode_fusion(&FrameFeatures::dense(shuffled), &query, &model).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..a.values.ncols() {
                assert!((b.values[[dst, c]] - a.values[[src, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_range_and_masking() {
        let model = MomentDiffModel::new(small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let video = FrameFeatures::new(random(&mut rng, 4, 6), vec![true, true, true, false]).unwrap();
        let query = QueryFeatures::dense(random(&mut rng, 1, 5));
        let f = encode_fusion(&video, &query, &model).unwrap();
        let s = similarity_scores(&f, &model).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s[..3].iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s[3], 0.0);
        assert_eq!(s, similarity_scores(&f, &model).unwrap());
    }

    #[test]
    fn zero_head_gives_half() {
        let mut model = MomentDiffModel::new(small_config(), 2).unwrap();
        for (name, p) in model.params.iter_mut() {
            if name.starts_with("cond.sim_head.1") {
                p.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let video = FrameFeatures::dense(random(&mut rng, 3, 6));
        let query = QueryFeatures::dense(random(&mut rng, 1, 5));
        let f = encode_fusion(&video, &query, &model).unwrap();
        assert!(similarity_scores(&f, &model).unwrap().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn labels_from_spans() {
        let mask = vec![true; 10];
        let labels = SimilarityLabels::from_spans(&[Span::from_interval(0.2, 0.42).unwrap()], &mask);
        let expected: Vec<bool> = (0..10).map(|i| (2..=3).contains(&i)).collect();
        assert_eq!(labels.y, expected);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = SimilarityLabels {
            y: vec![true, false, true, false],
        };
        let mask = vec![true; 4];
        let perfect = similarity_loss(&[1.0, 0.0, 1.0, 0.0], &labels, &mask, 4, DEFAULT_MARGIN, &mut rng).unwrap();
        assert!(perfect.pointwise <= 2.0 * (1.0 - SCORE_EPS).ln().abs());
        assert_eq!(perfect.pairwise, 0.0);

        let labels = SimilarityLabels { y: vec![true, false] };
        let l = similarity_loss(&[0.6, 0.5], &labels, &[true, true], 1, 0.2, &mut rng).unwrap();
        assert!((l.pairwise - 0.1).abs() < 1e-12);

        let none = SimilarityLabels { y: vec![true, true] };
        assert!(matches!(
            similarity_loss(&[0.6, 0.5], &none, &[true, true], 1, 0.2, &mut rng),
            Err(Error::MissingFrame("negative"))
        ));
        assert!(similarity_loss(&[0.6, 0.5], &none, &[true, true], 0, 0.2, &mut rng).is_ok());
    }

    #[test]
    fn masked_frames_do_not_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = SimilarityLabels {
            y: vec![true, false, false],
        };
        let a = similarity_loss(&[0.7, 0.2, 0.9], &labels, &[true, true, false], 0, 0.2, &mut rng).unwrap();
        let b = similarity_loss(&[0.7, 0.2], &SimilarityLabels { y: vec![true, false] }, &[true, true], 0, 0.2, &mut rng)
            .unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad[2], 0.0);
    }
}
