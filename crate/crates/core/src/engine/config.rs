use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the whole run.
    Cosine,
}

impl LrSchedule {
    /// Learning-rate multiplier at optimizer step `t` of `total`.
    pub fn factor(self, t: usize, total: usize, warmup: usize) -> f64 {
        let warm = if warmup > 0 && t < warmup {
            (t + 1) as f64 / warmup as f64
        } else {
            1.0
        };
        let decay = match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total.max(1) as f64).cos()),
        };
        warm * decay
    }
}

/// Optimization and sampling settings. The defaults are a desk-scale
/// configuration; [`TrainConfig::reference`] gives the full-scale schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Optimizer steps of linear warmup at the start of training.
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Hinge margin of the pairwise similarity term.
    pub margin: f64,
    /// Inference steps on the intensity ladder.
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Network and diffusion settings; feature widths are taken from the
    /// corpus at training time.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            warmup_steps: 100,
            grad_clip: 1.0,
            margin: crate::condition::DEFAULT_MARGIN,
            steps: 50,
            eta: 0.0,
            seed: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 100 epochs of batch 32 at learning rate 1e-4, similarity weight 1.
    pub fn reference() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            loss: LossWeights { lambda_sim: 1.0, ..LossWeights::default() },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && self.margin >= 0.0) {
            return bad("weight decay, clip and margin must be non-negative".into());
        }
        if self.steps == 0 || self.steps > self.model.intensities {
            return bad(format!("steps must lie in [1, {}], got {}", self.model.intensities, self.steps));
        }
        if !(self.eta >= 0.0) {
            return bad(format!("eta must be non-negative, got {}", self.eta));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::parse("<config>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("epochs = 3\n[loss]\nlambda_sim = 0.0\n[model]\nn_spans = 3\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.loss.lambda_sim, 0.0);
        assert_eq!(partial.loss.lambda_l1, 10.0);
        assert_eq!(partial.model.n_spans, 3);
        assert!(TrainConfig::from_toml_str("epoch = 3\n").is_err());
        assert!(TrainConfig::from_toml_str("steps = 0\n").is_err());
    }

    #[test]
    fn schedule_factors() {
        assert_eq!(LrSchedule::Constant.factor(5, 10, 0), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 10, 0), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10, 0) - 0.5).abs() < 1e-12);
        assert!((LrSchedule::Constant.factor(1, 10, 4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reference_schedule() {
        let r = TrainConfig::reference();
        assert_eq!((r.epochs, r.batch_size), (100, 32));
        assert_eq!((r.learning_rate, r.weight_decay), (1e-4, 1e-4));
        assert_eq!(r.loss.lambda_sim, 1.0);
    }
}
