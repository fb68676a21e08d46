//! The three frozen reward models (posture regressor, multi-label
//! classifier, image/report dual encoder) and the combined reward.

mod classifier;
mod dual;
mod posture;
mod train;

pub use classifier::{fit_classifier, ClassifierModel, ClassifierReport};
pub use dual::{fit_dual_encoder, fit_dual_encoder_with, DualEncoder, RetrievalReport, DEFAULT_EMBED_DIM, DEFAULT_TEMPERATURE};
pub use posture::{estimate_posture, fit_posture, PostureModel, PostureReport};
pub use train::FitConfig;

use thiserror::Error;

use crate::numcore::{GraphError, OptimError, ParamError};
use crate::phantom::{Image, PostureParams, K_LABELS};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("contrastive fitting needs batches of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("expected {K_LABELS} labels, got {0}")]
    LabelLength(usize),
    #[error("non-finite input image")]
    NonFiniteImage,
    #[error("image has {got} pixels, model expects {want}")]
    ImageSize { want: usize, got: usize },
    #[error("negative reward weight {0}")]
    NegativeWeight(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// `−(max(|s_x−1|,|s_y−1|) + |Θ|/(2π) + √(t_x²+t_y²))`
pub fn reward_align(psi: &PostureParams) -> f64 {
    let scale = (psi.s_x - 1.0).abs().max((psi.s_y - 1.0).abs());
    let rot = psi.theta.abs() / (2.0 * std::f64::consts::PI);
    let shift = psi.t_x.hypot(psi.t_y);
    -(scale + rot + shift)
}

/// How a single image's multi-label "accuracy" is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AccuracyMode {
    /// Fraction of classes whose thresholded prediction matches the label.
    #[default]
    Thresholded,
    /// Mean probability assigned to the true bit.
    Soft,
}

pub fn accuracy(probs: &[f64], labels: &[u8], mode: AccuracyMode) -> Result<f64, RewardError> {
    if labels.len() != K_LABELS || probs.len() != K_LABELS {
        return Err(RewardError::LabelLength(labels.len()));
    }
    let hits: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| match mode {
            AccuracyMode::Thresholded => f64::from(u8::from(p >= 0.5) == y),
            AccuracyMode::Soft => {
                if y == 1 {
                    p
                } else {
                    1.0 - p
                }
            }
        })
        .sum();
    Ok(hits / K_LABELS as f64)
}

/// `accuracy(G(x)) − accuracy(G(x̂))`
pub fn reward_diag(
    x: &Image,
    x_anchor: &Image,
    labels: &[u8],
    classifier: &ClassifierModel,
    mode: AccuracyMode,
) -> Result<f64, RewardError> {
    if labels.len() != K_LABELS {
        return Err(RewardError::LabelLength(labels.len()));
    }
    let p = classifier.probabilities(&[x, x_anchor])?;
    Ok(accuracy(&p[0], labels, mode)? - accuracy(&p[1], labels, mode)?)
}

/// `sim(F_v(x), F_t(y)) − sim(F_v(x̂), F_t(y))` with cosine similarity.
pub fn reward_consist(x: &Image, x_anchor: &Image, report: &str, encoder: &DualEncoder) -> Result<f64, RewardError> {
    let t = encoder.embed_reports(&[report])?;
    let v = encoder.embed_images(&[x, x_anchor])?;
    Ok(dual::cosine(&v[0], &t[0]) - dual::cosine(&v[1], &t[0]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda {
    pub align: f64,
    pub diag: f64,
    pub consist: f64,
}

impl Default for Lambda {
    fn default() -> Self {
        Self {
            align: 1.0,
            diag: 10.0,
            consist: 10.0,
        }
    }
}

impl Lambda {
    pub fn validate(&self) -> Result<(), RewardError> {
        for w in [self.align, self.diag, self.consist] {
            if !(w >= 0.0) {
                return Err(RewardError::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub r_align: f64,
    pub r_diag: f64,
    pub r_consist: f64,
    pub total: f64,
    pub lambda: Lambda,
}

impl RewardBreakdown {
    pub fn combine(r_align: f64, r_diag: f64, r_consist: f64, lambda: Lambda) -> Self {
        Self {
            r_align,
            r_diag,
            r_consist,
            total: lambda.align * r_align + lambda.diag * r_diag + lambda.consist * r_consist,
            lambda,
        }
    }
}

/// The three frozen reward models.
#[derive(Clone, Debug)]
pub struct RewardModels {
    pub posture: PostureModel,
    pub classifier: ClassifierModel,
    pub dual: DualEncoder,
}

impl RewardModels {
    /// Rewards for one (policy image, anchor image, report, labels) tuple.
    pub fn total_reward(
        &self,
        x: &Image,
        x_anchor: &Image,
        report: &str,
        labels: &[u8],
        lambda: Lambda,
        mode: AccuracyMode,
    ) -> Result<RewardBreakdown, RewardError> {
        let v = self.score_pairs(&[x], &[x_anchor], &[report], &[labels], lambda, mode)?;
        Ok(v[0])
    }

    /// Batched [`RewardModels::total_reward`]; every model runs once over
    /// the whole batch.
    pub fn score_pairs(
        &self,
        xs: &[&Image],
        anchors: &[&Image],
        reports: &[&str],
        labels: &[&[u8]],
        lambda: Lambda,
        mode: AccuracyMode,
    ) -> Result<Vec<RewardBreakdown>, RewardError> {
        lambda.validate()?;
        let n = xs.len();
        for l in labels {
            if l.len() != K_LABELS {
                return Err(RewardError::LabelLength(l.len()));
            }
        }
        let mut both: Vec<&Image> = xs.to_vec();
        both.extend_from_slice(anchors);
        let psi = self.posture.estimate_batch(xs)?;
        let probs = self.classifier.probabilities(&both)?;
        let img_emb = self.dual.embed_images(&both)?;
        let txt_emb = self.dual.embed_reports(reports)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let r_align = reward_align(&psi[i]);
            let r_diag = accuracy(&probs[i], labels[i], mode)? - accuracy(&probs[n + i], labels[i], mode)?;
            let r_consist = dual::cosine(&img_emb[i], &txt_emb[i]) - dual::cosine(&img_emb[n + i], &txt_emb[i]);
            out.push(RewardBreakdown::combine(r_align, r_diag, r_consist, lambda));
        }
        Ok(out)
    }
}

pub(crate) fn check_images(images: &[&Image], dim: usize) -> Result<(), RewardError> {
    for img in images {
        if img.pixels().len() != dim {
            return Err(RewardError::ImageSize {
                want: dim,
                got: img.pixels().len(),
            });
        }
        if !img.is_finite() {
            return Err(RewardError::NonFiniteImage);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_formula_by_hand() {
        assert_eq!(reward_align(&PostureParams::IDENTITY), 0.0);
        let psi = PostureParams {
            s_x: 1.2,
            s_y: 0.9,
            t_x: 0.3,
            t_y: 0.4,
            theta: std::f64::consts::FRAC_PI_2,
        };
        assert!((reward_align(&psi) + 0.95).abs() < 1e-12);
    }

    #[test]
    fn accuracy_modes() {
        let labels = [1, 0, 1, 1];
        assert_eq!(accuracy(&[0.9, 0.1, 0.8, 0.7], &labels, AccuracyMode::Thresholded).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.9, 0.1, 0.8, 0.2], &labels, AccuracyMode::Thresholded).unwrap(), 0.75);
        let soft = accuracy(&[0.9, 0.1, 0.8, 0.2], &labels, AccuracyMode::Soft).unwrap();
        assert!((soft - (0.9 + 0.9 + 0.8 + 0.2) / 4.0).abs() < 1e-12);
        assert!(accuracy(&[0.5; 4], &[1, 0], AccuracyMode::Soft).is_err());
    }

    #[test]
    fn combination_is_linear() {
        let b = RewardBreakdown::combine(-0.2, 0.1, 0.05, Lambda::default());
        assert!((b.total - 1.3).abs() < 1e-12);
        assert_eq!(RewardBreakdown::combine(0.0, 0.0, 0.0, Lambda::default()).total, 0.0);
        assert_eq!(Lambda::default(), Lambda { align: 1.0, diag: 10.0, consist: 10.0 });
        assert!(Lambda { align: -1.0, ..Lambda::default() }.validate().is_err());
    }
}
