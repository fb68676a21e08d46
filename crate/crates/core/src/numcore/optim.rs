use std::collections::BTreeMap;

use thiserror::Error;

use super::graph::Gradients;
use super::params::{ParamStore, Precision};
use super::tensor::Tensor;

/// Learning rate used when a configuration does not set one.
pub const DEFAULT_LR: f64 = 3e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for `{name}` has shape {got:?}, parameter has {want:?}")]
    Shape {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("no optimizer state for `{0}`")]
    MissingState(String),
    #[error("non-finite gradient for `{0}`")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Adaptive-moment optimizer state: one pair of moment tensors per
/// trainable parameter plus a step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments>,
    precision: Precision,
}

impl OptimState {
    /// Zero moments for every non-frozen entry of `store`.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| {
                let z = Tensor::zeros(p.value.shape().to_vec());
                (
                    k.to_string(),
                    Moments {
                        first: z.clone(),
                        second: z,
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
            precision: store.precision(),
        }
    }

    /// Rebuilds a state from stored moments (checkpoint load).
    pub fn from_parts(config: AdamConfig, step: u64, moments: BTreeMap<String, Moments>, precision: Precision) -> Self {
        Self {
            config,
            step,
            moments,
            precision,
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }
}

/// One bias-corrected adaptive-moment update. Parameters without a gradient
/// entry and frozen parameters are left untouched.
pub fn optimizer_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<(), OptimError> {
    // Validate everything before mutating anything.
    for (name, g) in grads.iter() {
        let m = state
            .moments
            .get(name)
            .ok_or_else(|| OptimError::MissingState(name.to_string()))?;
        if m.first.shape() != g.shape() {
            return Err(OptimError::Shape {
                name: name.to_string(),
                want: m.first.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFinite(name.to_string()));
        }
        match store.get(name) {
            Some(p) if p.value.shape() != g.shape() => {
                return Err(OptimError::Shape {
                    name: name.to_string(),
                    want: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                })
            }
            None => return Err(OptimError::MissingState(name.to_string())),
            _ => {}
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let quantize = state.precision == Precision::F32;

    for (name, g) in grads.iter() {
        let Some(param) = store.get_mut(name) else { continue };
        if param.frozen {
            continue;
        }
        let mo = state.moments.get_mut(name).expect("validated above");
        let (m, v) = (mo.first.data_mut(), mo.second.data_mut());
        let w = param.value.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            if quantize {
                m[i] = m[i] as f32 as f64;
                v[i] = v[i] as f32 as f64;
            }
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + eps);
            if quantize {
                w[i] = w[i] as f32 as f64;
            }
        }
    }
    Ok(())
}
