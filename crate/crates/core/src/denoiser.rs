//! Video moment denoiser `f(x_m, m, F)`.
//!
//! Each noisy span is projected to the hidden width, the sinusoidal
//! embedding of its noise intensity is added, and the result queries the
//! fusion embedding through two intensity-aware cross-attention blocks.
//! Queries are `[Proj(x' + e_m) | pos_m]` and keys `[Proj(F) | pos_f]`,
//! concatenated per head, so attention sees both content and position.
//! With `span_attention` each block first runs self-attention among the
//! spans of one query.

use ndarray::Array2;
use rand::Rng;

use crate::condition::{frame_positions, FusionEmbedding};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MomentDiffModel, SpanEmbedding};
use crate::nn::{init_mlp, ParamStore, Session};
use crate::spans::Span;
use crate::tape::{sin_cos, sinusoid_periods, AttentionLayout, Var};

/// Default number of random spans per query.
pub const DEFAULT_SPANS: usize = 5;

const BLOCKS: usize = 2;

/// Noisy spans at one intensity, already mapped back to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySpanSet {
    pub spans: Vec<Span>,
    pub intensity: usize,
}

/// Refined spans with one confidence logit each.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub spans: Vec<Span>,
    pub confidence: Vec<f64>,
}

impl PredictionSet {
    /// Index and span with the highest confidence (lowest index on ties).
    pub fn top1(&self) -> Option<(usize, Span)> {
        let mut best: Option<usize> = None;
        for (i, &c) in self.confidence.iter().enumerate() {
            if best.is_none_or(|b| c > self.confidence[b]) {
                best = Some(i);
            }
        }
        best.map(|i| (i, self.spans[i]))
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// `[sin(v / p_k) | cos(v / p_k)]` over `dim / 2` periods spaced
/// geometrically from 1 to `max_period`.
pub fn sinusoidal_embed(value: f64, dim: usize, max_period: f64) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let periods = sinusoid_periods(half, max_period);
    let mut out = vec![0.0; dim];
    for (k, p) in periods.iter().enumerate() {
        let arg = value / p;
        (out[k], out[half + k]) = sin_cos(arg);
    }
    Ok(out)
}

/// Inputs of the denoiser for a batch of queries.
#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    pub groups: usize,
    pub spans_per_group: usize,
    pub frames: usize,
    /// `(center, width)` rows in `[0, 1]`, `groups * spans_per_group` of them.
    pub spans: Array2<f64>,
    /// One intensity per group.
    pub intensities: Vec<usize>,
    pub video_mask: Vec<bool>,
    pub frame_counts: Vec<usize>,
}

impl DenoiseBatch {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.spans_per_group == 0 {
            return Err(Error::InvalidArgument("need at least one span per query".into()));
        }
        if self.spans.dim() != (self.groups * self.spans_per_group, 2) {
            return Err(Error::Shape(format!("span matrix has shape {:?}", self.spans.dim())));
        }
        if self.intensities.len() != self.groups || self.frame_counts.len() != self.groups {
            return Err(Error::Shape("one intensity and frame count per query".into()));
        }
        if self.video_mask.len() != self.groups * self.frames {
            return Err(Error::Shape("video mask length".into()));
        }
        for &m in &self.intensities {
            if m < 1 || m > cfg.intensities {
                return Err(Error::IntensityOutOfRange {
                    m,
                    lo: 1,
                    hi: cfg.intensities,
                });
            }
        }
        Ok(())
    }

    fn intensity_rows(&self, cfg: &ModelConfig) -> Array2<f64> {
        let mut out = Array2::zeros((self.groups * self.spans_per_group, cfg.hidden));
        if !cfg.use_intensity {
            return out;
        }
        for (g, &m) in self.intensities.iter().enumerate() {
            let e = sinusoidal_embed(m as f64, cfg.hidden, cfg.max_period).expect("even hidden");
            let e = ndarray::ArrayView1::from(&e);
            for r in 0..self.spans_per_group {
                out.row_mut(g * self.spans_per_group + r).assign(&e);
            }
        }
        out
    }

    /// Block-diagonal averaging matrix selecting, for each span, the valid
    /// frames its interval overlaps.
    fn roi_pooling(&self) -> Array2<f64> {
        let n_r = self.spans_per_group;
        let mut out = Array2::zeros((self.groups * n_r, self.groups * self.frames));
        for g in 0..self.groups {
            let rows: Vec<usize> = (0..self.frames)
                .filter(|&i| self.video_mask[g * self.frames + i])
                .map(|i| g * self.frames + i)
                .collect();
            let n = rows.len();
            if n == 0 {
                continue;
            }
            for r in 0..n_r {
                let row = g * n_r + r;
                let span = Span::new(self.spans[[row, 0]], self.spans[[row, 1]]).clamp_to_video();
                let (a, b) = span.interval();
                let mut hits: Vec<usize> = (0..n)
                    .filter(|&j| (j as f64) / (n as f64) < b && ((j + 1) as f64) / (n as f64) > a)
                    .collect();
                if hits.is_empty() {
                    hits.push(((span.center * n as f64) as usize).min(n - 1));
                }
                let w = 1.0 / hits.len() as f64;
                for j in hits {
                    out[[row, rows[j]]] = w;
                }
            }
        }
        out
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.hidden;
    let embed_in = match cfg.embedding {
        SpanEmbedding::Fc => 2,
        SpanEmbedding::Roi => d,
    };
    store.init_linear("den.span_embed", embed_in, d, rng);
    for l in 0..BLOCKS {
        if cfg.span_attention {
            for p in ["self_q", "self_k", "self_v"] {
                store.init_linear(&format!("den.block{l}.{p}"), d, d, rng);
            }
            store.init_layer_norm(&format!("den.block{l}.norm0"), d);
        }
        for p in ["q", "k", "v"] {
            store.init_linear(&format!("den.block{l}.{p}"), d, d, rng);
        }
        store.init_layer_norm(&format!("den.block{l}.norm1"), d);
        init_mlp(store, &format!("den.block{l}.ffn"), [d, 2 * d, d], rng);
        store.init_layer_norm(&format!("den.block{l}.norm2"), d);
    }
    init_mlp(store, "den.span_head", [d, d, 2], rng);
    store.init_linear("den.conf_head", d, 1, rng);
}

/// Graph handles of one denoiser pass.
pub(crate) struct DenoiserNodes {
    /// `(center, width)` per span after the logistic head.
    pub spans: Var,
    /// Confidence logit per span.
    pub confidence: Var,
}

pub(crate) fn build_denoiser(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    fusion: Var,
    batch: &DenoiseBatch,
) -> DenoiserNodes {
    let d = cfg.hidden;
    let span_input = sess.input(batch.spans.clone());
    let intensity = sess.input(batch.intensity_rows(cfg));

    let embedded = match cfg.embedding {
        SpanEmbedding::Fc => sess.linear("den.span_embed", span_input),
        SpanEmbedding::Roi => {
            let pool = sess.input(batch.roi_pooling());
            let pooled = sess.graph.matmul(pool, fusion);
            sess.linear("den.span_embed", pooled)
        }
    };
    let mut h = sess.graph.add(embedded, intensity);

    // Span positions in frame units so they share the frame embedding's
    // coordinate.
    let per_row: Vec<f64> = batch
        .frame_counts
        .iter()
        .flat_map(|&n| std::iter::repeat_n(n as f64, batch.spans_per_group))
        .collect();
    let center = sess.graph.slice_cols(span_input, 0, 1);
    let width = sess.graph.slice_cols(span_input, 1, 1);
    let center = sess.graph.scale_rows(center, per_row.clone());
    let width = sess.graph.scale_rows(width, per_row);
    let pos_c = sess.graph.sinusoid(center, d / 2, cfg.max_period, 1.0);
    let pos_w = sess.graph.sinusoid(width, d / 2, cfg.max_period, 1.0);
    let pos_m = sess.graph.concat_heads(pos_c, pos_w, 1);
    let pos_f = sess.input(frame_positions(batch.groups, batch.frames, d, cfg.max_period));

    let scale = 1.0 / ((2 * d / cfg.heads) as f64).sqrt();
    let span_mask = vec![true; batch.groups * batch.spans_per_group];
    for l in 0..BLOCKS {
        if cfg.span_attention {
            let sq = sess.linear(&format!("den.block{l}.self_q"), h);
            let sq = sess.graph.concat_heads(sq, pos_m, cfg.heads);
            let sk = sess.linear(&format!("den.block{l}.self_k"), h);
            let sk = sess.graph.concat_heads(sk, pos_m, cfg.heads);
            let sv = sess.linear(&format!("den.block{l}.self_v"), h);
            let layout = AttentionLayout {
                groups: batch.groups,
                queries: batch.spans_per_group,
                keys: batch.spans_per_group,
                heads: cfg.heads,
                key_mask: span_mask.clone(),
            };
            let a = sess.graph.attention(sq, sk, sv, layout, scale);
            let r = sess.graph.add(h, a);
            h = sess.layer_norm(&format!("den.block{l}.norm0"), r);
        }
        let qc = sess.linear(&format!("den.block{l}.q"), h);
        let q = sess.graph.concat_heads(qc, pos_m, cfg.heads);
        let kc = sess.linear(&format!("den.block{l}.k"), fusion);
        let k = sess.graph.concat_heads(kc, pos_f, cfg.heads);
        let v = sess.linear(&format!("den.block{l}.v"), fusion);
        let layout = AttentionLayout {
            groups: batch.groups,
            queries: batch.spans_per_group,
            keys: batch.frames,
            heads: cfg.heads,
            key_mask: batch.video_mask.clone(),
        };
        let a = sess.graph.attention(q, k, v, layout, scale);
        let r = sess.graph.add(qc, a);
        h = sess.layer_norm(&format!("den.block{l}.norm1"), r);
        let f = sess.mlp(&format!("den.block{l}.ffn"), h);
        let r = sess.graph.add(h, f);
        h = sess.layer_norm(&format!("den.block{l}.norm2"), r);
    }

    let raw = sess.mlp("den.span_head", h);
    let spans = sess.graph.sigmoid(raw);
    let confidence = sess.linear("den.conf_head", h);
    DenoiserNodes { spans, confidence }
}

/// Reads the prediction of group `g` out of a finished pass.
pub(crate) fn read_predictions(sess: &Session<'_>, nodes: &DenoiserNodes, g: usize, n_r: usize) -> PredictionSet {
    let spans = sess.value(nodes.spans);
    let conf = sess.value(nodes.confidence);
    let rows = g * n_r..(g + 1) * n_r;
    PredictionSet {
        spans: rows.clone().map(|r| Span::new(spans[[r, 0]], spans[[r, 1]])).collect(),
        confidence: rows.map(|r| conf[[r, 0]]).collect(),
    }
}

/// Denoises one query's span set against its fusion embedding.
pub fn denoise_forward(noisy: &NoisySpanSet, fusion: &FusionEmbedding, model: &MomentDiffModel) -> Result<PredictionSet> {
    let cfg = &model.config;
    if fusion.values.ncols() != cfg.hidden || fusion.mask.len() != fusion.values.nrows() {
        return Err(Error::Shape("fusion embedding does not match the model".into()));
    }
    let n_r = noisy.spans.len();
    let mut spans = Array2::zeros((n_r, 2));
    for (i, s) in noisy.spans.iter().enumerate() {
        spans[[i, 0]] = s.center;
        spans[[i, 1]] = s.width;
    }
    let batch = DenoiseBatch {
        groups: 1,
        spans_per_group: n_r,
        frames: fusion.values.nrows(),
        spans,
        intensities: vec![noisy.intensity],
        video_mask: fusion.mask.clone(),
        frame_counts: vec![fusion.mask.iter().filter(|&&m| m).count()],
    };
    batch.validate(cfg)?;
    let mut sess = Session::new(&model.params);
    let f = sess.input(fusion.values.clone());
    let nodes = build_denoiser(&mut sess, cfg, f, &batch);
    Ok(read_predictions(&sess, &nodes, 0, n_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: ModelConfig) -> (MomentDiffModel, FusionEmbedding, NoisySpanSet) {
        let model = MomentDiffModel::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values = Array2::from_shape_fn((6, cfg.hidden), |_| rng.random_range(-1.0..1.0));
        let fusion = FusionEmbedding {
            values,
            mask: vec![true, true, true, true, false, false],
        };
        let noisy = NoisySpanSet {
            spans: (0..cfg.n_spans)
                .map(|_| Span::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
                .collect(),
            intensity: 37,
        };
        (model, fusion, noisy)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_video: 4,
            d_text: 4,
            hidden: 8,
            heads: 2,
            n_spans: 3,
            intensities: 100,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_examples() {
        let e = sinusoidal_embed(0.0, 8, 10_000.0).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(sinusoidal_embed(1.0, 7, 10_000.0).is_err());
        let e = sinusoidal_embed(123.4, 64, 10_000.0).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn embed_distinguishes_all_intensities() {
        let table: Vec<Vec<f64>> = (1..=1000)
            .map(|m| sinusoidal_embed(m as f64, 256, 10_000.0).unwrap())
            .collect();
        for i in 0..table.len() {
            for j in i + 1..table.len() {
                let d: f64 = table[i].iter().zip(&table[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d > 0.0, "{} and {} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn output_contract_and_determinism() {
        let (model, fusion, noisy) = setup(small());
        let a = denoise_forward(&noisy, &fusion, &model).unwrap();
        assert_eq!(a.spans.len(), 3);
        assert_eq!(a.confidence.len(), 3);
        assert!(a
            .spans
            .iter()
            .all(|s| (0.0..=1.0).contains(&s.center) && (0.0..=1.0).contains(&s.width)));
        let b = denoise_forward(&noisy, &fusion, &model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (model, fusion, mut noisy) = setup(small());
        noisy.intensity = 0;
        assert!(matches!(
            denoise_forward(&noisy, &fusion, &model),
            Err(Error::IntensityOutOfRange { .. })
        ));
        noisy.intensity = 101;
        assert!(denoise_forward(&noisy, &fusion, &model).is_err());
        noisy.intensity = 5;
        noisy.spans.clear();
        assert!(matches!(
            denoise_forward(&noisy, &fusion, &model),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn masked_frames_are_invisible() {
        for embedding in [SpanEmbedding::Fc, SpanEmbedding::Roi] {
            let (model, fusion, noisy) = setup(ModelConfig {
                embedding,
                ..small()
            });
            let a = denoise_forward(&noisy, &fusion, &model).unwrap();
            let mut altered = fusion.clone();
            altered.values.row_mut(4).fill(1e3);
            altered.values.row_mut(5).fill(-7.0);
            let b = denoise_forward(&noisy, &altered, &model).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn intensity_toggle_changes_outputs() {
        let (model, fusion, noisy) = setup(small());
        let off = MomentDiffModel {
            config: ModelConfig {
                use_intensity: false,
                ..model.config.clone()
            },
            params: model.params.clone(),
        };
        let a = denoise_forward(&noisy, &fusion, &model).unwrap();
        let b = denoise_forward(&noisy, &fusion, &off).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn spans_interact_only_with_span_attention() {
        for span_attention in [false, true] {
            let (model, fusion, noisy) = setup(ModelConfig {
                span_attention,
                ..small()
            });
            let a = denoise_forward(&noisy, &fusion, &model).unwrap();
            let mut moved = noisy.clone();
            moved.spans[0] = Span::new(0.9, 0.05);
            let b = denoise_forward(&moved, &fusion, &model).unwrap();
            assert_ne!(a.spans[0], b.spans[0]);
            assert_eq!(a.spans[1..] != b.spans[1..], span_attention);
            assert_eq!(a.confidence[1..] != b.confidence[1..], span_attention);
        }
    }

    #[test]
    fn top1_prefers_lowest_index_on_ties() {
        let p = PredictionSet {
            spans: vec![Span::new(0.1, 0.1), Span::new(0.2, 0.1), Span::new(0.3, 0.1)],
            confidence: vec![0.5, 2.0, 2.0],
        };
        assert_eq!(p.top1().unwrap().0, 1);
    }
}
