//! Conditional denoising diffusion: schedule, closed-form forward noising,
//! the conditional noise predictor, stochastic reverse sampling with
//! per-step Gaussian log-densities, and noise-prediction pretraining.

mod denoiser;
mod pretrain;
mod sample;

pub use denoiser::{ConditionBatch, Denoiser, DenoiserConfig, DENOISER_PREFIX};
pub use pretrain::{pretrain_step, PretrainItem};
pub use sample::{sample_batch, sample_trajectory, Trajectory};

use thiserror::Error;

use crate::numcore::{GraphError, OptimError, Tensor};
use crate::textcond::TextError;

pub const DEFAULT_T: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("standard deviation must be positive, got {0}")]
    Sigma(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite network output at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Noise schedule constants for `t = 1..=T` (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn idx(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::Timestep { t, steps: self.steps });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// Linear β from `beta_min` to `beta_max`, `σ_t² = β_t`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// β bounds rescaled from the 1000-step convention to `steps` steps.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let k = 1000.0 / steps as f64;
    (1e-4 * k, 0.02 * k)
}

pub fn default_schedule(steps: usize) -> Result<DiffusionSchedule, DiffusionError> {
    let (lo, hi) = default_beta_range(steps);
    make_schedule(steps, lo, hi)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor, DiffusionError> {
    same_shape(x0, eps)?;
    let ab = sched.alpha_bar[sched.idx(t)?];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data).expect("shape preserved"))
}

/// Coefficients `(1/√α_t, β_t/(√(1−ᾱ_t)·√α_t))` so that `μ = c0·x_t − c1·ε̂`.
pub fn mean_coefficients(t: usize, sched: &DiffusionSchedule) -> (f64, f64) {
    let (a, ab, b) = (sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
    let inv = 1.0 / a.sqrt();
    (inv, b / (1.0 - ab).sqrt() * inv)
}

/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`
pub fn denoise_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor, DiffusionError> {
    same_shape(x_t, eps_hat)?;
    sched.idx(t)?;
    let ab = sched.alpha_bar(t);
    let k = sched.beta(t) / (1.0 - ab).sqrt();
    let s = sched.alpha(t).sqrt();
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(x, e)| (x - k * e) / s).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data).expect("shape preserved"))
}

/// `Σ_d log N(x_prev[d]; μ[d], σ²)`
pub fn transition_logprob(x_prev: &[f64], mean: &[f64], sigma: f64) -> Result<f64, DiffusionError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DiffusionError::Sigma(sigma));
    }
    if x_prev.len() != mean.len() {
        return Err(DiffusionError::Shape(vec![x_prev.len()], vec![mean.len()]));
    }
    let var = sigma * sigma;
    let sq: f64 = x_prev.iter().zip(mean).map(|(x, m)| (x - m) * (x - m)).sum();
    Ok(-0.5 * sq / var - 0.5 * x_prev.len() as f64 * (2.0 * std::f64::consts::PI * var).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gaussian_sample, RngStream};

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.sigma(1).powi(2) - 0.1).abs() < 1e-15);
        assert!((s.sigma(2).powi(2) - 0.2).abs() < 1e-15);
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(3, 0.3, 0.2).is_err());
        assert!(make_schedule(3, 0.0, 0.2).is_err());
        assert!(make_schedule(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_is_monotone_and_stochastic() {
        let s = default_schedule(DEFAULT_T).unwrap();
        assert!((s.beta(1) - 2e-3).abs() < 1e-15);
        assert!((s.beta(50) - 0.4).abs() < 1e-15);
        for t in 2..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((1..=50).all(|t| s.sigma(t) > 0.0 && s.beta(t) < 1.0));
    }

    #[test]
    fn forward_noise_by_hand() {
        let s = make_schedule(2, 0.19, 0.2).unwrap();
        let x = forward_noise(&Tensor::vector(vec![1.0]), 1, &Tensor::vector(vec![0.0]), &s).unwrap();
        assert!((x.data()[0] - 0.9).abs() < 1e-12);
        let e = Tensor::vector(vec![0.6, 0.8]);
        let x = forward_noise(&Tensor::vector(vec![0.0, 0.0]), 1, &e, &s).unwrap();
        assert!((x.sq_norm().sqrt() - 0.19f64.sqrt()).abs() < 1e-12);
        assert!(forward_noise(&Tensor::vector(vec![0.0]), 1, &e, &s).is_err());
        assert!(forward_noise(&e, 3, &e, &s).is_err());
        let tiny = make_schedule(1, 1e-12, 1e-12).unwrap();
        let x = forward_noise(&e, 1, &Tensor::vector(vec![5.0, 5.0]), &tiny).unwrap();
        assert!((x.data()[0] - 0.6).abs() < 1e-5);
    }

    #[test]
    fn forward_marginal_moments() {
        let s = default_schedule(50).unwrap();
        let t = 20;
        let mut st = RngStream::new(0, "marginal");
        let x0 = 0.7;
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e = gaussian_sample(&mut st, &[1]).unwrap();
                forward_noise(&Tensor::vector(vec![x0]), t, &e, &s).unwrap().data()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se);
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    }

    #[test]
    fn denoise_mean_by_hand() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        let x = Tensor::vector(vec![1.0]);
        let m = denoise_mean(&x, &Tensor::vector(vec![1.0]), 2, &s).unwrap();
        let expect = (1.0 - 0.2 / 0.28f64.sqrt()) / 0.8f64.sqrt();
        assert!((m.data()[0] - expect).abs() < 1e-12);
        assert!((m.data()[0] - 0.6955).abs() < 1e-4);
        let m0 = denoise_mean(&x, &Tensor::vector(vec![0.0]), 2, &s).unwrap();
        assert!((m0.data()[0] - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        let (c0, c1) = mean_coefficients(2, &s);
        assert!((c0 - c1 - expect).abs() < 1e-12);
    }

    #[test]
    fn log_density_by_hand() {
        let v = transition_logprob(&[0.3], &[0.3], 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let d = 7;
        let sigma: f64 = 0.3;
        let v = transition_logprob(&vec![0.1; d], &vec![0.1; d], sigma).unwrap();
        let expect = -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!((v - expect).abs() < 1e-12);
        let far = transition_logprob(&[1.0], &[0.0], 1.0).unwrap();
        let near = transition_logprob(&[0.5], &[0.0], 1.0).unwrap();
        assert!(near > far);
        assert!(transition_logprob(&[0.0], &[0.0], 0.0).is_err());
        assert!(transition_logprob(&[0.0], &[0.0], -1.0).is_err());
    }
}
