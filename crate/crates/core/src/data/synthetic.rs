//! Synthetic corpora with planted moments.
//!
//! Every sample picks a target prototype among `K` random unit vectors. Frames
//! inside the ground-truth moment show the target prototype, the rest show
//! other prototypes, all with additive Gaussian noise. The query is a fixed
//! random linear image of the target prototype plus noise.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::annotations::{MomentAnnotation, Partition};
use super::corpus::{Corpus, Sample};
use crate::condition::SimilarityLabels;
use crate::error::{Error, Result};
use crate::spans::Span;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WidthDist {
    Uniform { lo: f64, hi: f64 },
}

/// Distribution of the normalized moment center given its width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CenterDist {
    /// Uniform over every center that keeps the moment inside the video.
    Feasible,
    /// Uniform on `[lo, hi]`, then clipped into the feasible range.
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Samples in the `train` partition.
    pub n_samples: usize,
    /// Additional held-out samples in the `test` partition.
    pub n_test_samples: usize,
    pub n_frames: usize,
    pub d_video: usize,
    pub d_text: usize,
    /// Query tokens; with more than one, the target prototype's coordinates
    /// are split across tokens.
    pub n_tokens: usize,
    pub n_prototypes: usize,
    pub feature_noise_sigma: f64,
    pub query_noise_sigma: f64,
    pub width: WidthDist,
    pub center: CenterDist,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 2000,
            n_test_samples: 500,
            n_frames: 32,
            d_video: 64,
            d_text: 32,
            n_tokens: 1,
            n_prototypes: 8,
            feature_noise_sigma: 0.3,
            query_noise_sigma: 0.1,
            width: WidthDist::Uniform { lo: 0.1, hi: 0.6 },
            center: CenterDist::Feasible,
            duration_s: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Reads a TOML file; missing fields keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SyntheticConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_prototypes < 2 {
            return bad(format!("need at least 2 prototypes, got {}", self.n_prototypes));
        }
        if self.n_samples + self.n_test_samples == 0 {
            return bad("corpus would be empty".into());
        }
        if self.n_frames == 0 || self.d_video == 0 || self.d_text == 0 {
            return bad("frame count and feature dimensions must be positive".into());
        }
        if self.n_tokens == 0 || self.n_tokens > self.d_video {
            return bad(format!("token count {} outside [1, d_video]", self.n_tokens));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.query_noise_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration_s));
        }
        let WidthDist::Uniform { lo, hi } = self.width;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("infeasible width bounds [{lo}, {hi}]"));
        }
        if lo * (self.n_frames as f64) < 1.0 {
            return bad(format!(
                "minimum width {lo} covers less than one of {} frames",
                self.n_frames
            ));
        }
        if let CenterDist::Uniform { lo, hi } = self.center {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("infeasible center bounds [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    fn draw_span<R: Rng + ?Sized>(&self, rng: &mut R) -> Span {
        let WidthDist::Uniform { lo, hi } = self.width;
        let width = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let half = width / 2.0;
        let center = match self.center {
            CenterDist::Feasible => half + rng.random::<f64>() * (1.0 - width),
            CenterDist::Uniform { lo, hi } => {
                let c = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                c.clamp(half, 1.0 - half)
            }
        };
        Span::new(center, width)
    }
}

/// A generated corpus together with the hidden quantities that planted it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// `K × d_video`, unit rows.
    pub prototypes: Array2<f64>,
    /// `d_video × d_text`; the clean query of prototype `p` is `prototypes[p] · text_map`.
    pub text_map: Array2<f64>,
    /// Target prototype of every sample.
    pub targets: Vec<usize>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, dv, dt, nf, nt) = (cfg.n_prototypes, cfg.d_video, cfg.d_text, cfg.n_frames, cfg.n_tokens);

    let mut prototypes = Array2::from_shape_simple_fn((k, dv), || gaussian(&mut rng));
    for mut row in prototypes.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    let text_scale = 1.0 / (dt as f64).sqrt();
    let text_map = Array2::from_shape_simple_fn((dv, dt), || gaussian(&mut rng) * text_scale);

    let total = cfg.n_samples + cfg.n_test_samples;
    let mut video = Array3::<f32>::zeros((total, nf, dv));
    let mut query = Array3::<f32>::zeros((total, nt, dt));
    let mut samples = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    let chunk = dv.div_ceil(nt);
    let all_frames = vec![true; nf];

    for i in 0..total {
        let target = rng.random_range(0..k);
        let span = cfg.draw_span(&mut rng);
        let (start, end) = span.interval();
        let raw = (
            (start * cfg.duration_s).max(0.0),
            (end * cfg.duration_s).min(cfg.duration_s),
        );
        let partition = if i < cfg.n_samples { Partition::Train } else { Partition::Test };
        let annotation = MomentAnnotation::new(format!("v{i:05}"), format!("q{i:05}"), cfg.duration_s, vec![raw])?
            .with_partition(Some(partition));

        let labels = SimilarityLabels::from_spans(&annotation.gt, &all_frames);
        let others: Vec<usize> = (0..k).filter(|&p| p != target).collect();
        for f in 0..nf {
            let p = if labels.y[f] { target } else { *others.choose(&mut rng).unwrap() };
            for d in 0..dv {
                let v = prototypes[[p, d]] + cfg.feature_noise_sigma * gaussian(&mut rng);
                video[[i, f, d]] = v as f32;
            }
        }
        for t in 0..nt {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(dv);
            for j in 0..dt {
                let clean: f64 = (lo..hi).map(|d| prototypes[[target, d]] * text_map[[d, j]]).sum();
                let v = clean + cfg.query_noise_sigma * gaussian(&mut rng);
                query[[i, t, j]] = v as f32;
            }
        }
        samples.push(Sample {
            annotation,
            video_len: nf,
            query_len: nt,
        });
        targets.push(target);
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(video, query, samples)?,
        prototypes,
        text_map,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_samples: n,
            n_test_samples: 0,
            n_frames: 16,
            d_video: 8,
            d_text: 4,
            seed,
            ..SyntheticConfig::default()
        }
    }

    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&small(20, 3)).unwrap();
        let b = generate_corpus(&small(20, 3)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate_corpus(&small(20, 4)).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn emitted_spans_are_valid() {
        let g = generate_corpus(&small(500, 1)).unwrap();
        for s in &g.corpus.samples {
            for span in &s.annotation.gt {
                span.validate().unwrap();
                assert!(span.start() >= 0.0 && span.end() <= 1.0);
            }
        }
    }

    #[test]
    fn span_distributions_match_configuration() {
        let g = generate_corpus(&small(10_000, 9)).unwrap();
        let widths: Vec<f64> = g.corpus.samples.iter().map(|s| s.annotation.gt[0].width).collect();
        let offsets: Vec<f64> = g
            .corpus
            .samples
            .iter()
            .map(|s| {
                let sp = s.annotation.gt[0];
                (sp.center - sp.width / 2.0) / (1.0 - sp.width)
            })
            .collect();
        let dw = ks_uniform(widths, 0.1, 0.6);
        let dc = ks_uniform(offsets, 0.0, 1.0);
        assert!(dw < 0.05, "width KS statistic {dw}");
        assert!(dc < 0.05, "center KS statistic {dc}");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(10, 0);
        c.n_prototypes = 1;
        assert!(generate_corpus(&c).is_err());
        let mut c = small(10, 0);
        c.width = WidthDist::Uniform { lo: 0.0, hi: 0.5 };
        assert!(generate_corpus(&c).is_err());
        let mut c = small(10, 0);
        c.width = WidthDist::Uniform { lo: 0.7, hi: 0.5 };
        assert!(generate_corpus(&c).is_err());
    }

    #[test]
    fn multi_token_queries_sum_to_the_single_token_image() {
        let mut c = small(5, 2);
        c.n_tokens = 2;
        c.query_noise_sigma = 0.0;
        let g = generate_corpus(&c).unwrap();
        for i in 0..5 {
            let q = g.corpus.query_features(i).values;
            let summed = q.sum_axis(ndarray::Axis(0));
            let clean = g.prototypes.row(g.targets[i]).dot(&g.text_map);
            for (a, b) in summed.iter().zip(clean.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let c: SyntheticConfig = toml::from_str(
            "n_samples = 10\nseed = 7\n[width]\nkind = \"uniform\"\nlo = 0.2\nhi = 0.3\n[center]\nkind = \"uniform\"\nlo = 0.1\nhi = 0.4\n",
        )
        .unwrap();
        assert_eq!(c.n_samples, 10);
        assert_eq!(c.width, WidthDist::Uniform { lo: 0.2, hi: 0.3 });
        assert_eq!(c.center, CenterDist::Uniform { lo: 0.1, hi: 0.4 });
        assert_eq!(c.d_video, 64);
    }
}
