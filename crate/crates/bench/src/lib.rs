//! Shared fixtures for the pipeline benchmarks.

use momentdiff_core::condition::{FrameFeatures, QueryFeatures};
use momentdiff_core::{ModelConfig, MomentDiffModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random cost matrix in `[-1, 1)`.
pub fn random_costs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Untrained model at the desk-scale default dimensions.
pub fn default_model(seed: u64) -> MomentDiffModel {
    MomentDiffModel::new(ModelConfig::default(), seed).expect("default config is valid")
}

/// Random dense video and query features matching `cfg`.
pub fn random_sample(cfg: &ModelConfig, n_frames: usize, seed: u64) -> (FrameFeatures, QueryFeatures) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = Array2::from_shape_fn((n_frames, cfg.d_video), |_| rng.random_range(-1.0..1.0));
    let query = Array2::from_shape_fn((1, cfg.d_text), |_| rng.random_range(-1.0..1.0));
    (FrameFeatures::dense(video), QueryFeatures::dense(query))
}
