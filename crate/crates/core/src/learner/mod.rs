//! The built-in segmentation learner: a per-pixel logistic model over
//! multi-scale box features, trained by full-batch gradient descent on the
//! Combo loss.

mod features;
mod loss;
mod model;

pub use features::{box_stats, extract_features, feature_count, gradient_magnitude, FeatureMap, PixelFeatures};
pub use loss::{binary_cross_entropy, combo_loss, combo_loss_grad, combo_loss_logit_grad, dice_term};
pub use model::{logistic, train, train_on_features, ProbabilityMap, Segmenter, TrainingReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("window size {scale} larger than patch side {side}")]
    ScaleTooLarge { scale: usize, side: usize },
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite loss at epoch {epoch} (learning rate {learning_rate})")]
    NonFinite { epoch: usize, learning_rate: f64 },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("patch has {found} image channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Odd box-window sizes, each at least 3.
    pub scales: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Dice smoothing constant `S`.
    pub smoothing: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 − prob_clamp]`.
    pub prob_clamp: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self { scales: vec![3, 7, 15], learning_rate: 0.05, epochs: 40, smoothing: 1.0, prob_clamp: 1e-7, seed: 0 }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: String| Err(LearnerError::InvalidConfig(m));
        if self.scales.is_empty() {
            return bad("at least one window size required".into());
        }
        if let Some(s) = self.scales.iter().find(|&&s| s < 3 || s % 2 == 0) {
            return bad(format!("window size {s} must be odd and at least 3"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive".into());
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return bad("smoothing must be positive".into());
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return bad("probability clamp must lie in (0, 0.5)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_valid() {
        LearnerConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            LearnerConfig { scales: vec![4], ..Default::default() },
            LearnerConfig { scales: vec![1], ..Default::default() },
            LearnerConfig { prob_clamp: 0.5, ..Default::default() },
            LearnerConfig { prob_clamp: 0.0, ..Default::default() },
            LearnerConfig { learning_rate: -1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
