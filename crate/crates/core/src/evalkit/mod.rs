//! Evaluation metrics: reward-aligned means, AUROC, a feature-space Fréchet
//! distance, SSIM diversity and the reward ablation table.

mod stats;

pub use stats::{
    auroc, frechet_distance, mean, ssim, ssim_diversity, std_dev, student_t_cdf, t_test_greater, DEFAULT_SSIM_PAIRS,
    SSIM_WINDOW,
};

use thiserror::Error;

use crate::rewards::RewardError;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("AUROC needs both positive and negative labels")]
    SingleClass,
    #[error("need more than {dim} samples, got {n}")]
    TooFewSamples { n: usize, dim: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty set")]
    Empty,
    #[error(transparent)]
    Reward(#[from] RewardError),
}
