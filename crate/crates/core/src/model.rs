//! Model configuration and parameter ownership for the full network
//! (condition generator followed by the moment denoiser).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition;
use crate::denoiser;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// How a noisy span enters the embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpanEmbedding {
    /// Fully connected projection of `(center, width)`.
    #[default]
    Fc,
    /// Mean of the fusion rows the span overlaps, then a projection.
    Roi,
}

impl std::str::FromStr for SpanEmbedding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(SpanEmbedding::Fc),
            "roi" => Ok(SpanEmbedding::Roi),
            other => Err(Error::InvalidArgument(format!("unknown span embedding {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_video: usize,
    pub d_text: usize,
    /// Hidden size `D` of every attention layer.
    pub hidden: usize,
    pub heads: usize,
    pub max_text_len: usize,
    /// Number of spans `N_r` denoised per query.
    pub n_spans: usize,
    /// Training intensities `M`.
    pub intensities: usize,
    /// Diffusion-domain scale `λ`.
    pub scale: f64,
    pub embedding: SpanEmbedding,
    /// Adds the sinusoidal intensity embedding to span queries.
    pub use_intensity: bool,
    /// Lets the spans of one query attend to each other before attending
    /// to frames.
    pub span_attention: bool,
    /// Adds frame position embeddings before frame self-attention.
    pub frame_position: bool,
    pub max_period: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_video: 64,
            d_text: 32,
            hidden: 64,
            heads: 2,
            max_text_len: 32,
            n_spans: 5,
            intensities: crate::diffusion::DEFAULT_INTENSITIES,
            scale: crate::spans::DEFAULT_SCALE,
            embedding: SpanEmbedding::Fc,
            use_intensity: true,
            span_attention: false,
            frame_position: true,
            max_period: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return bad(format!("hidden size must be even and positive, got {}", self.hidden));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || (self.hidden / 2) % self.heads != 0 {
            return bad(format!("{} heads do not divide hidden size {}", self.heads, self.hidden));
        }
        if self.d_video == 0 || self.d_text == 0 || self.max_text_len == 0 {
            return bad("feature dimensions and text length must be positive".into());
        }
        if self.n_spans == 0 {
            return bad("need at least one span".into());
        }
        if self.intensities == 0 {
            return bad("need at least one intensity".into());
        }
        if !(self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        Ok(())
    }

    /// Attention head width of the condition generator.
    pub(crate) fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Network parameters together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDiffModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MomentDiffModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        condition::init_params(&mut params, &config, &mut rng);
        denoiser::init_params(&mut params, &config, &mut rng);
        Ok(MomentDiffModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = MomentDiffModel::new(config.clone(), 0)?;
        for (name, value) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.dim() == value.dim() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Shape("checkpoint has unexpected parameters".into()));
        }
        Ok(MomentDiffModel { config, params })
    }
}
