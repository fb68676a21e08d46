//! Reward-driven fine-tuning of the generator against a frozen anchor:
//! paired rollouts, the trajectory score-function gradient, and the
//! training loop.

mod estimator;

pub use estimator::reinforce_gradients;

use std::time::Instant;

use thiserror::Error;

use crate::diffusion::{
    mean_coefficients, sample_batch, ConditionBatch, Denoiser, DiffusionError, DiffusionSchedule, Trajectory,
};
use crate::evalkit::{mean, std_dev};
use crate::numcore::{
    AdamConfig, Gradients, Graph, GraphError, OptimError, OptimState, ParamError, ParamStore, RngStream, Tensor, Var,
    DEFAULT_LR,
};
use crate::phantom::{Image, PhantomSample, K_LABELS};
use crate::rewards::{AccuracyMode, Lambda, RewardBreakdown, RewardError, RewardModels};
use crate::textcond::{encode_report, register_ace, tokenize, AceEmbedding, RowRole, TextError, ACE_PARAM};

pub const DEFAULT_CLIP_NORM: f64 = 1.0;
/// Learning rate of the desk-scale profile. The paper-scale rate
/// ([`DEFAULT_LR`]) moves every weight by about its own step size per update
/// whatever the signal, which at 16 rollouts per step swamps the reward.
pub const SMOKE_LR: f64 = 3e-5;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trajectory was sampled under parameters {got}, current parameters are {want}")]
    OffPolicy { want: String, got: String },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("no prompts to train on")]
    NoPrompts,
    #[error("{0}")]
    Hook(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub batch: usize,
    pub lr: f64,
    pub lambda: Lambda,
    pub steps: usize,
    pub shared_noise: bool,
    pub whiten: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub accuracy: AccuracyMode,
    pub seed: u64,
}

impl RlConfig {
    /// Desk-scale profile: 16 rollouts per step for 300 steps.
    pub fn smoke(seed: u64) -> Self {
        Self {
            batch: 16,
            lr: SMOKE_LR,
            lambda: Lambda::default(),
            steps: 300,
            shared_noise: true,
            whiten: false,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            accuracy: AccuracyMode::Thresholded,
            seed,
        }
    }

    /// Batch of 81 at 3e-4.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch: 81,
            lr: DEFAULT_LR,
            ..Self::smoke(seed)
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if self.batch == 0 {
            return Err(RlError::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RlError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(RlError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.lambda.validate().map_err(|e| RlError::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Per-step training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub grad_norm: f64,
    pub seconds: f64,
}

impl StepStats {
    pub fn mean_r_align(&self) -> f64 {
        self.mean[0]
    }

    pub fn mean_r_diag(&self) -> f64 {
        self.mean[1]
    }

    pub fn mean_r_consist(&self) -> f64 {
        self.mean[2]
    }

    pub fn mean_total(&self) -> f64 {
        self.mean[3]
    }

    pub const CSV_HEADER: &'static str = "step,mean_r_align,mean_r_diag,mean_r_consist,mean_total,grad_norm,seconds,\
std_r_align,std_r_diag,std_r_consist,std_total,config_hash";

    pub fn csv_row(&self, config_hash: &str) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.step,
            self.mean[0],
            self.mean[1],
            self.mean[2],
            self.mean[3],
            self.grad_norm,
            self.seconds,
            self.std[0],
            self.std[1],
            self.std[2],
            self.std[3],
            config_hash
        )
    }
}

/// Frozen copy of the pretrained generator. It never sees condition rows
/// other than the report's.
#[derive(Clone, Debug)]
pub struct AnchorModel {
    store: ParamStore,
    pub den: Denoiser,
    pub sched: DiffusionSchedule,
    hash: String,
}

impl AnchorModel {
    pub fn new(pretrained: &ParamStore, den: Denoiser, sched: DiffusionSchedule) -> Self {
        let mut store = pretrained.clone();
        store.freeze_all();
        let hash = store.content_hash();
        Self { store, den, sched, hash }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Trainable generator plus its condition rows.
#[derive(Clone, Debug)]
pub struct Policy {
    pub store: ParamStore,
    pub den: Denoiser,
    pub sched: DiffusionSchedule,
}

impl Policy {
    /// Starts from the pretrained weights. The report encoder stays frozen;
    /// `ace` (possibly empty) is registered as trainable.
    pub fn from_pretrained(
        pretrained: &ParamStore,
        den: Denoiser,
        sched: DiffusionSchedule,
        ace: &AceEmbedding,
    ) -> Result<Self, RlError> {
        let mut store = pretrained.clone();
        store.freeze_prefix(&format!("{}.", crate::textcond::ENCODER_PREFIX), true);
        register_ace(&mut store, ace)?;
        Ok(Self { store, den, sched })
    }

    pub fn uses_ace(&self) -> bool {
        self.store.contains(ACE_PARAM)
    }

    pub fn ace(&self) -> AceEmbedding {
        AceEmbedding::from_store(&self.store, self.den.cfg.d_tau)
    }
}

/// A report with its ground-truth labels and frozen embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub report: String,
    pub labels: [u8; K_LABELS],
    pub embedding: Tensor,
}

pub fn prompts_from_samples(samples: &[PhantomSample], encoder: &ParamStore) -> Result<Vec<Prompt>, RlError> {
    samples
        .iter()
        .map(|s| {
            Ok(Prompt {
                report: s.report.clone(),
                labels: s.labels,
                embedding: encode_report(&tokenize(&s.report), encoder)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPair {
    pub trajectory: Trajectory,
    pub image: Image,
    pub anchor_image: Image,
}

/// Policy rollouts (recorded) and anchor rollouts for the same reports.
/// With `shared_noise` the anchor replays each policy stream exactly;
/// otherwise it draws from `<label>/anchor`.
pub fn rollout_batch(
    policy: &Policy,
    anchor: &AnchorModel,
    reports: &[&Tensor],
    streams: &mut [RngStream],
    shared_noise: bool,
) -> Result<Vec<RolloutPair>, RlError> {
    let mut anchor_streams: Vec<RngStream> = streams
        .iter()
        .map(|s| if shared_noise { s.clone() } else { s.derive("anchor") })
        .collect();
    let trajs = sample_batch(&policy.store, &policy.den, &policy.sched, policy.uses_ace(), reports, streams, true)?;
    let anchors = sample_batch(&anchor.store, &anchor.den, &anchor.sched, false, reports, &mut anchor_streams, false)?;
    Ok(trajs
        .into_iter()
        .zip(anchors)
        .map(|(trajectory, a)| RolloutPair {
            image: trajectory.final_image(),
            anchor_image: a.final_image(),
            trajectory,
        })
        .collect())
}

/// Single-pair form of [`rollout_batch`].
pub fn rollout_pair(
    policy: &Policy,
    anchor: &AnchorModel,
    report: &Tensor,
    stream: &mut RngStream,
    shared_noise: bool,
) -> Result<RolloutPair, RlError> {
    let mut streams = [stream.clone()];
    let mut v = rollout_batch(policy, anchor, &[report], &mut streams, shared_noise)?;
    *stream = streams[0].clone();
    Ok(v.remove(0))
}

/// Report rows of a recorded condition.
fn report_rows(traj: &Trajectory) -> Tensor {
    let c = &traj.condition;
    let d = c.width();
    let rows: Vec<f64> = c
        .roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == RowRole::Report)
        .flat_map(|(i, _)| c.matrix.row(i).to_vec())
        .collect();
    let n = rows.len() / d;
    Tensor::new(vec![n, d], rows).expect("consistent")
}

/// Per-item `log p(x_{t−1} | x_t, c)` under the current parameters for a
/// batch of recorded trajectories, as a `[B]` graph node.
pub fn trajectory_logprob(
    g: &mut Graph<'_>,
    policy: &Policy,
    trajs: &[&Trajectory],
    reports: &[Tensor],
    t: usize,
) -> Result<Var, GraphError> {
    let b = trajs.len();
    let dim = policy.den.cfg.image_dim;
    let (c0, c1) = mean_coefficients(t, &policy.sched);
    let sigma = policy.sched.sigma(t);
    let mut xt = Vec::with_capacity(b * dim);
    let mut resid = Vec::with_capacity(b * dim);
    for tr in trajs {
        let (cur, prev) = (&tr.states[t], &tr.states[t - 1]);
        xt.extend_from_slice(cur);
        // x_{t−1} − μ = (x_{t−1} − c0·x_t) + c1·ε̂
        resid.extend(prev.iter().zip(cur).map(|(p, c)| p - c0 * c));
    }
    let ace = if policy.uses_ace() { Some(g.param(ACE_PARAM)?) } else { None };
    let refs: Vec<&Tensor> = reports.iter().collect();
    let cond = ConditionBatch::from_reports(g, ace, &refs)?;
    let xv = g.constant(Tensor::new(vec![b, dim], xt)?)?;
    let eps = policy.den.eps_hat(g, xv, &vec![t; b], &cond)?;
    let scaled = g.scale(eps, c1)?;
    let base = g.constant(Tensor::new(vec![b, dim], resid)?)?;
    let diff = g.add(base, scaled)?;
    let sq = g.square(diff)?;
    let ss = g.sum_last(sq)?;
    let quad = g.scale(ss, -0.5 / (sigma * sigma))?;
    let norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let offset = g.constant(Tensor::full(vec![b], norm))?;
    g.add(quad, offset)
}

/// Result of one policy-gradient update.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    /// `Σ_t log p` per trajectory, recomputed under the pre-update
    /// parameters.
    pub logprob: Vec<f64>,
    pub gradients: Gradients,
}

/// Rewards as used to weight the score function: raw, or standardized
/// within the batch when `whiten` is set.
pub fn reward_weights(rewards: &[f64], whiten: bool) -> Vec<f64> {
    if !whiten || rewards.len() < 2 {
        return rewards.to_vec();
    }
    let m = mean(rewards);
    let s = std_dev(rewards);
    if s == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - m) / s).collect()
}

/// Ascends `(1/B)·Σ_i r_i·Σ_t ∇log p(x_{t−1}^i | x_t^i, c^i)` on the policy
/// parameters (generator and condition rows jointly).
pub fn policy_gradient_step(
    policy: &mut Policy,
    batch: &[(&Trajectory, f64)],
    optim: &mut OptimState,
    whiten: bool,
    clip_norm: Option<f64>,
) -> Result<GradientReport, RlError> {
    if batch.is_empty() {
        return Err(RlError::Config("empty batch".into()));
    }
    let current = policy.store.content_hash();
    for (tr, _) in batch {
        if tr.param_hash != current {
            return Err(RlError::OffPolicy {
                want: current,
                got: tr.param_hash.clone(),
            });
        }
    }
    let trajs: Vec<&Trajectory> = batch.iter().map(|(t, _)| *t).collect();
    let rewards: Vec<f64> = batch.iter().map(|(_, r)| *r).collect();
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(RlError::NonFinite("reward".into()));
    }
    let weights = reward_weights(&rewards, whiten);
    let reports: Vec<Tensor> = trajs.iter().map(|t| report_rows(t)).collect();
    let steps = trajs[0].steps();
    let pol = &*policy;
    let (mut grads, logprob) = reinforce_gradients(&pol.store, &weights, steps, |g, t| {
        trajectory_logprob(g, pol, &trajs, &reports, t)
    })?;
    if !grads.all_finite() {
        return Err(RlError::NonFinite("gradient".into()));
    }
    let grad_norm = match clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    crate::numcore::optimizer_step(&mut policy.store, &grads, optim)?;
    Ok(GradientReport {
        grad_norm,
        logprob,
        gradients: grads,
    })
}

/// Everything needed to continue fine-tuning from step `next_step`.
#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub policy: Policy,
    pub optim: OptimState,
    pub next_step: usize,
}

impl FinetuneState {
    pub fn new(policy: Policy, cfg: &RlConfig) -> Self {
        let optim = OptimState::new(&policy.store, cfg.adam());
        Self {
            policy,
            optim,
            next_step: 0,
        }
    }
}

/// Prompt indices drawn for `step` (uniform, with replacement).
pub fn batch_indices(cfg: &RlConfig, step: usize, n_prompts: usize) -> Vec<usize> {
    let mut s = RngStream::new(cfg.seed, format!("rl/batch/{step}"));
    (0..cfg.batch).map(|_| s.below(n_prompts)).collect()
}

pub fn rollout_streams(cfg: &RlConfig, step: usize) -> Vec<RngStream> {
    (0..cfg.batch)
        .map(|i| RngStream::new(cfg.seed, format!("rl/rollout/{step}/{i}")))
        .collect()
}

fn summarize(step: usize, rewards: &[RewardBreakdown], grad_norm: f64, seconds: f64) -> Result<StepStats, RlError> {
    let cols: [Vec<f64>; 4] = [
        rewards.iter().map(|r| r.r_align).collect(),
        rewards.iter().map(|r| r.r_diag).collect(),
        rewards.iter().map(|r| r.r_consist).collect(),
        rewards.iter().map(|r| r.total).collect(),
    ];
    let mut m = [0.0; 4];
    let mut s = [0.0; 4];
    for k in 0..4 {
        m[k] = mean(&cols[k]);
        s[k] = if cols[k].len() > 1 { std_dev(&cols[k]) } else { 0.0 };
    }
    if m.iter().chain(&s).any(|v| !v.is_finite()) || !grad_norm.is_finite() {
        return Err(RlError::NonFinite(format!("statistics at step {step}")));
    }
    Ok(StepStats {
        step,
        mean: m,
        std: s,
        grad_norm,
        seconds,
    })
}

/// Rewards for one batch of rollout pairs.
pub fn score_rollouts(
    pairs: &[RolloutPair],
    prompts: &[&Prompt],
    models: &RewardModels,
    cfg: &RlConfig,
) -> Result<Vec<RewardBreakdown>, RlError> {
    let xs: Vec<&Image> = pairs.iter().map(|p| &p.image).collect();
    let anchors: Vec<&Image> = pairs.iter().map(|p| &p.anchor_image).collect();
    let reports: Vec<&str> = prompts.iter().map(|p| p.report.as_str()).collect();
    let labels: Vec<&[u8]> = prompts.iter().map(|p| &p.labels[..]).collect();
    Ok(models.score_pairs(&xs, &anchors, &reports, &labels, cfg.lambda, cfg.accuracy)?)
}

/// Runs steps `state.next_step..cfg.steps`. After every completed step
/// `on_step` sees the statistics and the updated state (for logging and
/// checkpointing); its error aborts the run. Every random draw of a step is
/// keyed by the step index, so resuming from a saved state continues the
/// uninterrupted run exactly.
pub fn finetune<F>(
    state: &mut FinetuneState,
    anchor: &AnchorModel,
    models: &RewardModels,
    prompts: &[Prompt],
    cfg: &RlConfig,
    mut on_step: F,
) -> Result<Vec<StepStats>, RlError>
where
    F: FnMut(&StepStats, &FinetuneState) -> Result<(), RlError>,
{
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(RlError::NoPrompts);
    }
    let mut log = Vec::new();
    while state.next_step < cfg.steps {
        let step = state.next_step;
        let start = Instant::now();
        let picked: Vec<&Prompt> = batch_indices(cfg, step, prompts.len()).into_iter().map(|i| &prompts[i]).collect();
        let reports: Vec<&Tensor> = picked.iter().map(|p| &p.embedding).collect();
        let mut streams = rollout_streams(cfg, step);
        let pairs = rollout_batch(&state.policy, anchor, &reports, &mut streams, cfg.shared_noise)?;
        let rewards = score_rollouts(&pairs, &picked, models, cfg)?;
        let batch: Vec<(&Trajectory, f64)> = pairs.iter().zip(&rewards).map(|(p, r)| (&p.trajectory, r.total)).collect();
        let report = policy_gradient_step(&mut state.policy, &batch, &mut state.optim, cfg.whiten, cfg.clip_norm)?;
        state.next_step += 1;
        let stats = summarize(step, &rewards, report.grad_norm, start.elapsed().as_secs_f64())?;
        on_step(&stats, state)?;
        log.push(stats);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitening_standardizes() {
        let w = reward_weights(&[1.0, 2.0, 3.0], true);
        assert!((mean(&w)).abs() < 1e-12);
        assert!((std_dev(&w) - 1.0).abs() < 1e-12);
        assert_eq!(reward_weights(&[1.0, 2.0], false), vec![1.0, 2.0]);
        assert_eq!(reward_weights(&[2.0, 2.0], true), vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(RlConfig::smoke(0).validate().is_ok());
        assert_eq!(RlConfig::paper(0).batch, 81);
        assert_eq!(RlConfig::paper(0).lr, 3e-4);
        assert!(RlConfig { batch: 0, ..RlConfig::smoke(0) }.validate().is_err());
        let neg = RlConfig {
            lambda: Lambda { diag: -1.0, ..Lambda::default() },
            ..RlConfig::smoke(0)
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn batches_are_keyed_by_step() {
        let cfg = RlConfig::smoke(3);
        assert_eq!(batch_indices(&cfg, 5, 100), batch_indices(&cfg, 5, 100));
        assert_ne!(batch_indices(&cfg, 5, 100), batch_indices(&cfg, 6, 100));
        assert!(batch_indices(&cfg, 0, 7).iter().all(|&i| i < 7));
    }
}
