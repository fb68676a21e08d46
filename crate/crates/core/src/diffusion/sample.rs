use super::denoiser::{ConditionBatch, Denoiser};
use super::{mean_coefficients, transition_logprob, DiffusionError, DiffusionSchedule};
use crate::numcore::{Graph, GraphError, ParamStore, RngStream, Tensor};
use crate::phantom::Image;
use crate::textcond::{build_condition, AceEmbedding, Condition, ACE_PARAM};

/// One reverse-diffusion rollout. `states[t]` is `x_t` for `t = 0..=T`;
/// `means[t - 1]` and `logprobs[t - 1]` belong to the transition
/// `x_t → x_{t-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub logprobs: Vec<f64>,
    pub condition: Condition,
    pub stream_label: String,
    /// Content hash of the parameters the rollout was sampled under.
    pub param_hash: String,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.logprobs.len()
    }

    /// Raw `x_0` clamped to `[0, 1]` as a square image.
    pub fn final_image(&self) -> Image {
        to_image(&self.states[0])
    }
}

pub(crate) fn to_image(x: &[f64]) -> Image {
    let side = (x.len() as f64).sqrt().round() as usize;
    Image::new(side, side, x.iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("square image")
}

fn map_graph(t: usize) -> impl Fn(GraphError) -> DiffusionError {
    move |e| match e {
        GraphError::NonFinite(_) => DiffusionError::NonFinite(t),
        other => DiffusionError::Graph(other),
    }
}

/// Rolls out one trajectory per report, all in lock-step. Entry `i` draws
/// its initial state and every transition noise from `streams[i]` only, so
/// results do not depend on how rollouts are grouped into batches. When
/// `use_ace` is set the stored `ace` rows are prepended to each report.
pub fn sample_batch(
    store: &ParamStore,
    den: &Denoiser,
    sched: &DiffusionSchedule,
    use_ace: bool,
    reports: &[&Tensor],
    streams: &mut [RngStream],
    record: bool,
) -> Result<Vec<Trajectory>, DiffusionError> {
    let b = reports.len();
    if b == 0 || streams.len() != b {
        return Err(DiffusionError::EmptyBatch);
    }
    let dim = den.cfg.image_dim;
    let steps = sched.steps();
    let hash = if record { store.content_hash() } else { String::new() };
    let ace = if use_ace {
        AceEmbedding::from_store(store, den.cfg.d_tau)
    } else {
        AceEmbedding::empty(den.cfg.d_tau)
    };

    let mut x: Vec<f64> = Vec::with_capacity(b * dim);
    for s in streams.iter_mut() {
        x.extend((0..dim).map(|_| s.normal()));
    }
    let mut states: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    let mut logprobs: Vec<Vec<f64>> = vec![Vec::new(); b];
    if record {
        for (i, st) in states.iter_mut().enumerate() {
            st.push(x[i * dim..(i + 1) * dim].to_vec());
        }
    }

    for t in (1..=steps).rev() {
        let mut g = Graph::inference(store);
        let ace_var = if use_ace && ace.rows() > 0 {
            Some(g.param(ACE_PARAM).map_err(map_graph(t))?)
        } else {
            None
        };
        let cond = ConditionBatch::from_reports(&mut g, ace_var, reports).map_err(map_graph(t))?;
        let xv = g.constant(Tensor::new(vec![b, dim], x.clone()).expect("consistent")).map_err(map_graph(t))?;
        let eps = den.eps_hat(&mut g, xv, &vec![t; b], &cond).map_err(map_graph(t))?;
        let eps = g.value(eps).data();
        let (c0, c1) = mean_coefficients(t, sched);
        let sigma = sched.sigma(t);
        let mut next = vec![0.0; b * dim];
        for i in 0..b {
            let xr = &x[i * dim..(i + 1) * dim];
            let er = &eps[i * dim..(i + 1) * dim];
            let mu: Vec<f64> = xr.iter().zip(er).map(|(x, e)| c0 * x - c1 * e).collect();
            let nr = &mut next[i * dim..(i + 1) * dim];
            for (n, m) in nr.iter_mut().zip(&mu) {
                *n = m + sigma * streams[i].normal();
            }
            if nr.iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::NonFinite(t));
            }
            if record {
                logprobs[i].push(transition_logprob(nr, &mu, sigma)?);
                means[i].push(mu);
                states[i].push(nr.to_vec());
            }
        }
        x = next;
    }

    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let (mut st, mut mu, mut lp) = (
            std::mem::take(&mut states[i]),
            std::mem::take(&mut means[i]),
            std::mem::take(&mut logprobs[i]),
        );
        if record {
            // Recorded from t = T down; store indexed by t.
            st.reverse();
            mu.reverse();
            lp.reverse();
        } else {
            st = vec![x[i * dim..(i + 1) * dim].to_vec()];
        }
        out.push(Trajectory {
            states: st,
            means: mu,
            logprobs: lp,
            condition: build_condition(&ace, reports[i]).map_err(|_| {
                DiffusionError::Shape(vec![ace.width()], reports[i].shape().to_vec())
            })?,
            stream_label: streams[i].label().to_string(),
            param_hash: hash.clone(),
        });
    }
    Ok(out)
}

/// A single recorded trajectory for `report`.
pub fn sample_trajectory(
    store: &ParamStore,
    den: &Denoiser,
    sched: &DiffusionSchedule,
    use_ace: bool,
    report: &Tensor,
    stream: &mut RngStream,
) -> Result<Trajectory, DiffusionError> {
    let mut streams = [stream.clone()];
    let mut v = sample_batch(store, den, sched, use_ace, &[report], &mut streams, true)?;
    *stream = streams[0].clone();
    Ok(v.remove(0))
}
