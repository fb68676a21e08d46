//! Flat `key=value` configuration.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diffusion::{default_beta_range, DiffusionSchedule, DiffusionError, make_schedule, DEFAULT_T};
use crate::numcore::sha256_hex;
use crate::rewards::{AccuracyMode, FitConfig, Lambda};
use crate::rlcf::{RlConfig, DEFAULT_CLIP_NORM, SMOKE_LR};
use crate::textcond::{DEFAULT_D_TAU, DEFAULT_N_ACE, M_MAX};
use crate::phantom::{DEFAULT_IMAGE_SIZE, DEFAULT_N_TEST, DEFAULT_N_TRAIN, K_LABELS};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: `{value}` ({why})")]
    Value { key: String, value: String, why: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Every tunable of the pipeline.
///
/// `beta_min`/`beta_max` left unset follow the step-count rescaled default.
/// A `grad_clip` of 0 disables clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub steps: usize,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub d_tau: usize,
    pub n_ace: usize,
    pub m_max: usize,
    pub k_labels: usize,
    pub lambda: Lambda,
    pub batch_size: usize,
    pub lr: f64,
    pub rl_steps: usize,
    pub shared_noise: bool,
    pub whiten_rewards: bool,
    pub grad_clip: f64,
    pub output_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub reward_epochs: usize,
    pub reward_batch: usize,
    pub reward_lr: f64,
    pub embed_dim: usize,
    pub temperature: f64,
    pub accuracy: AccuracyMode,
    pub checkpoint_every: usize,
    pub eval_n: usize,
    pub ssim_pairs: usize,
    pub ablate_steps: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: DEFAULT_IMAGE_SIZE,
            steps: DEFAULT_T,
            beta_min: None,
            beta_max: None,
            d_tau: DEFAULT_D_TAU,
            n_ace: DEFAULT_N_ACE,
            m_max: M_MAX,
            k_labels: K_LABELS,
            lambda: Lambda::default(),
            batch_size: 16,
            lr: SMOKE_LR,
            rl_steps: 300,
            shared_noise: true,
            whiten_rewards: false,
            grad_clip: DEFAULT_CLIP_NORM,
            output_dir: PathBuf::from("out"),
            n_train: DEFAULT_N_TRAIN,
            n_test: DEFAULT_N_TEST,
            hidden: 256,
            pretrain_steps: 5000,
            pretrain_batch: 64,
            pretrain_lr: 1e-3,
            reward_epochs: 40,
            reward_batch: 64,
            reward_lr: 1e-3,
            embed_dim: crate::rewards::DEFAULT_EMBED_DIM,
            temperature: crate::rewards::DEFAULT_TEMPERATURE,
            accuracy: AccuracyMode::Thresholded,
            checkpoint_every: 25,
            eval_n: 256,
            ssim_pairs: crate::evalkit::DEFAULT_SSIM_PAIRS,
            ablate_steps: 100,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "T",
    "beta_min",
    "beta_max",
    "d_tau",
    "n_ace",
    "m_max",
    "k_labels",
    "lambda_align",
    "lambda_diag",
    "lambda_consist",
    "batch_size",
    "lr",
    "rl_steps",
    "shared_noise",
    "whiten_rewards",
    "grad_clip",
    "output_dir",
    "n_train",
    "n_test",
    "hidden",
    "pretrain_steps",
    "pretrain_batch",
    "pretrain_lr",
    "reward_epochs",
    "reward_batch",
    "reward_lr",
    "embed_dim",
    "temperature",
    "accuracy",
    "checkpoint_every",
    "eval_n",
    "ssim_pairs",
    "ablate_steps",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        why: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            why: "expected true or false".into(),
        }),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".into(), |x| format!("{x:?}"))
}

impl Config {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "T" => self.steps = parse(key, v)?,
            "beta_min" => self.beta_min = parse_opt_f64(key, v)?,
            "beta_max" => self.beta_max = parse_opt_f64(key, v)?,
            "d_tau" => self.d_tau = parse(key, v)?,
            "n_ace" => self.n_ace = parse(key, v)?,
            "m_max" => self.m_max = parse(key, v)?,
            "k_labels" => self.k_labels = parse(key, v)?,
            "lambda_align" => self.lambda.align = parse(key, v)?,
            "lambda_diag" => self.lambda.diag = parse(key, v)?,
            "lambda_consist" => self.lambda.consist = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "rl_steps" => self.rl_steps = parse(key, v)?,
            "shared_noise" => self.shared_noise = parse_bool(key, v)?,
            "whiten_rewards" => self.whiten_rewards = parse_bool(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "reward_epochs" => self.reward_epochs = parse(key, v)?,
            "reward_batch" => self.reward_batch = parse(key, v)?,
            "reward_lr" => self.reward_lr = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "accuracy" => {
                self.accuracy = match v {
                    "hard" => AccuracyMode::Thresholded,
                    "soft" => AccuracyMode::Soft,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            why: "expected hard or soft".into(),
                        })
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_n" => self.eval_n = parse(key, v)?,
            "ssim_pairs" => self.ssim_pairs = parse(key, v)?,
            "ablate_steps" => self.ablate_steps = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "T" => self.steps.to_string(),
            "beta_min" => fmt_opt(self.beta_min),
            "beta_max" => fmt_opt(self.beta_max),
            "d_tau" => self.d_tau.to_string(),
            "n_ace" => self.n_ace.to_string(),
            "m_max" => self.m_max.to_string(),
            "k_labels" => self.k_labels.to_string(),
            "lambda_align" => format!("{:?}", self.lambda.align),
            "lambda_diag" => format!("{:?}", self.lambda.diag),
            "lambda_consist" => format!("{:?}", self.lambda.consist),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "rl_steps" => self.rl_steps.to_string(),
            "shared_noise" => self.shared_noise.to_string(),
            "whiten_rewards" => self.whiten_rewards.to_string(),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "output_dir" => self.output_dir.display().to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "hidden" => self.hidden.to_string(),
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_lr" => format!("{:?}", self.pretrain_lr),
            "reward_epochs" => self.reward_epochs.to_string(),
            "reward_batch" => self.reward_batch.to_string(),
            "reward_lr" => format!("{:?}", self.reward_lr),
            "embed_dim" => self.embed_dim.to_string(),
            "temperature" => format!("{:?}", self.temperature),
            "accuracy" => match self.accuracy {
                AccuracyMode::Thresholded => "hard".into(),
                AccuracyMode::Soft => "soft".into(),
            },
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_n" => self.eval_n.to_string(),
            "ssim_pairs" => self.ssim_pairs.to_string(),
            "ablate_steps" => self.ablate_steps.to_string(),
            _ => return None,
        })
    }

    /// Parses config text: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the optional file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: o.clone(),
            })?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.m_max != M_MAX {
            return bad(format!("m_max is fixed at {M_MAX} by the tokenizer, got {}", self.m_max));
        }
        if self.k_labels != K_LABELS {
            return bad(format!("k_labels is fixed at {K_LABELS} by the phantom generator, got {}", self.k_labels));
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.d_tau == 0 || self.d_tau % 2 != 0 {
            return bad(format!("d_tau must be positive and even, got {}", self.d_tau));
        }
        if self.hidden == 0 || self.hidden % 8 != 0 {
            return bad(format!("hidden must be a positive multiple of 8, got {}", self.hidden));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("pretrain_batch", self.pretrain_batch),
            ("reward_epochs", self.reward_epochs),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("embed_dim", self.embed_dim),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_n", self.eval_n),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.reward_batch < 2 {
            return bad("reward_batch must be at least 2".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("pretrain_lr", self.pretrain_lr),
            ("reward_lr", self.reward_lr),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be finite and non-negative, got {}", self.grad_clip));
        }
        self.lambda.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical `(key, value)` pairs in declaration order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("every key has a value")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Rebuilds a config from a checkpoint snapshot.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Hash of every setting except where outputs go.
    pub fn hash(&self) -> String {
        let text: String = self
            .pairs()
            .into_iter()
            .filter(|(k, _)| k != "output_dir")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        let (lo, hi) = default_beta_range(self.steps);
        (self.beta_min.unwrap_or(lo), self.beta_max.unwrap_or(hi))
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, DiffusionError> {
        let (lo, hi) = self.beta_range();
        make_schedule(self.steps, lo, hi)
    }

    pub fn rl(&self) -> RlConfig {
        RlConfig {
            batch: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
            steps: self.rl_steps,
            shared_noise: self.shared_noise,
            whiten: self.whiten_rewards,
            clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
            accuracy: self.accuracy,
            seed: self.seed,
        }
    }

    pub fn reward_fit(&self) -> FitConfig {
        FitConfig {
            epochs: self.reward_epochs,
            batch: self.reward_batch,
            lr: self.reward_lr,
        }
    }
}
