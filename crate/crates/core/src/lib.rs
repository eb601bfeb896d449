//! Diffusion-based video moment retrieval.
//!
//! A query and a sequence of frame features are fused by a similarity-aware
//! condition generator; randomly initialized spans are then refined by an
//! intensity-aware denoiser over a DDIM ladder until the final step returns
//! the retrieved `(center, width)` moments with confidences.

pub mod condition;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod spans;
pub mod tape;

pub use condition::{encode_fusion, similarity_loss, similarity_scores, FrameFeatures, FusionEmbedding, QueryFeatures};
pub use denoiser::{denoise_forward, NoisySpanSet, PredictionSet};
pub use diffusion::{ddim_step, q_sample, NoiseDraw, NoiseSchedule};
pub use error::{Error, Result};
pub use model::{ModelConfig, MomentDiffModel, SpanEmbedding};
pub use objective::{hungarian_match, total_loss, vmr_loss, LossWeights, MatchResult};
pub use spans::{giou_loss, iou, ScaledSpan, Span};
