use super::DiffusionSchedule;
use crate::numcore::nn::{init_linear, linear};
use crate::numcore::{Graph, GraphError, ParamError, ParamStore, RngStream, Tensor, Var};

pub const DENOISER_PREFIX: &str = "den";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_dim: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub d_tau: usize,
    pub time_dim: usize,
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_dim: 32 * 32,
            hidden: 256,
            tokens: 8,
            d_tau: 32,
            time_dim: 32,
            steps: super::DEFAULT_T,
        }
    }
}

impl DenoiserConfig {
    pub fn token_dim(&self) -> usize {
        self.hidden / self.tokens
    }
}

/// Condition rows for a batch: `[B, L, d_tau]` plus a keep flag per row.
pub struct ConditionBatch {
    pub rows: Var,
    pub keep: Vec<bool>,
}

impl ConditionBatch {
    /// Right-pads each `[M_i, d]` report embedding to the longest and, if
    /// `ace` is given, prepends its rows to every entry.
    pub fn from_reports(g: &mut Graph<'_>, ace: Option<Var>, reports: &[&Tensor]) -> Result<Self, GraphError> {
        let d = reports.first().map_or(0, |r| r.shape()[1]);
        let m = reports.iter().map(|r| r.shape()[0]).max().unwrap_or(0);
        let mut data = Vec::with_capacity(reports.len() * m * d);
        let mut keep_rep = Vec::with_capacity(reports.len() * m);
        for r in reports {
            if r.shape()[1] != d {
                return Err(GraphError::Shape {
                    op: "condition",
                    lhs: vec![m, d],
                    rhs: r.shape().to_vec(),
                });
            }
            let mi = r.shape()[0];
            data.extend_from_slice(r.data());
            data.extend(std::iter::repeat_n(0.0, (m - mi) * d));
            keep_rep.extend((0..m).map(|j| j < mi));
        }
        let rest = g.constant(Tensor::new(vec![reports.len(), m, d], data)?)?;
        Self::assemble(g, ace, rest, keep_rep)
    }

    /// Prepends `ace` rows (if any) to an in-graph `[B, M, d]` report block.
    pub fn assemble(g: &mut Graph<'_>, ace: Option<Var>, reports: Var, keep: Vec<bool>) -> Result<Self, GraphError> {
        let (b, m) = (g.shape(reports)[0], g.shape(reports)[1]);
        let Some(ace) = ace else {
            return Ok(Self { rows: reports, keep });
        };
        let n = g.shape(ace)[0];
        let rows = g.prepend_rows(ace, reports)?;
        let mut full = Vec::with_capacity(b * (n + m));
        for bi in 0..b {
            full.extend(std::iter::repeat_n(true, n));
            full.extend_from_slice(&keep[bi * m..(bi + 1) * m]);
        }
        Ok(Self { rows, keep: full })
    }
}

/// Noise predictor: flattened image → feature tokens (with an additive
/// sinusoidal time embedding) → one cross-attention block over the
/// condition rows → residual perceptron head.
///
/// The head estimates the clean image; the emitted noise estimate is
/// `ε̂ = g_t·x_t/√(1−ᾱ_t) − √(ᾱ_t/(1−ᾱ_t))·head`, where the learned per-step
/// gain `g_t` starts at 1. A bottlenecked head could not otherwise express
/// the near-identity map from `x_t` to `ε` needed at small `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    alpha_bar: Vec<f64>,
}

fn p(name: &str) -> String {
    format!("{DENOISER_PREFIX}.{name}")
}

impl Denoiser {
    /// Architecture handle without registering parameters.
    pub fn new(cfg: DenoiserConfig, sched: &DiffusionSchedule) -> Self {
        Self {
            cfg: DenoiserConfig {
                steps: sched.steps(),
                ..cfg
            },
            alpha_bar: (1..=sched.steps()).map(|t| sched.alpha_bar(t)).collect(),
        }
    }

    /// Registers freshly initialized parameters under the `den.` prefix.
    pub fn init(
        store: &mut ParamStore,
        cfg: DenoiserConfig,
        sched: &DiffusionSchedule,
        stream: &mut RngStream,
    ) -> Result<Self, ParamError> {
        let den = Self::new(cfg, sched);
        let cfg = den.cfg;
        let td = cfg.token_dim();
        init_linear(store, &p("in"), cfg.image_dim, cfg.hidden, 1.0, stream)?;
        init_linear(store, &p("time"), cfg.time_dim, cfg.hidden, 1.0, stream)?;
        init_linear(store, &p("q"), td, td, 1.0, stream)?;
        init_linear(store, &p("k"), cfg.d_tau, td, 1.0, stream)?;
        init_linear(store, &p("v"), cfg.d_tau, td, 1.0, stream)?;
        init_linear(store, &p("o"), td, td, 1.0, stream)?;
        init_linear(store, &p("mid"), cfg.hidden, cfg.hidden, 1.0, stream)?;
        init_linear(store, &p("out"), cfg.hidden, cfg.image_dim, 0.0, stream)?;
        store.insert(p("skip"), Tensor::full(vec![cfg.steps, 1], 1.0), false)?;
        Ok(den)
    }

    /// Sinusoidal features of the timestep, `[B, time_dim]`.
    pub fn time_features(&self, t: &[usize]) -> Tensor {
        let half = self.cfg.time_dim / 2;
        let mut data = Vec::with_capacity(t.len() * self.cfg.time_dim);
        for &ti in t {
            let row_start = data.len();
            for k in 0..half {
                let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
                data.push((ti as f64 * freq).sin());
            }
            for k in 0..half {
                let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
                data.push((ti as f64 * freq).cos());
            }
            data.resize(row_start + self.cfg.time_dim, 0.0);
        }
        Tensor::new(vec![t.len(), self.cfg.time_dim], data).expect("consistent")
    }

    /// `ε̂(x_t, t, c)` for a batch: `x` is `[B, image_dim]`, `t` holds one
    /// timestep (1-based) per row.
    pub fn eps_hat(&self, g: &mut Graph<'_>, x: Var, t: &[usize], cond: &ConditionBatch) -> Result<Var, GraphError> {
        let cfg = &self.cfg;
        let b = t.len();
        let (nt, td) = (cfg.tokens, cfg.token_dim());
        let l = g.shape(cond.rows)[1];

        let hx = linear(g, x, &p("in"))?;
        let tf = g.constant(self.time_features(t))?;
        let ht = linear(g, tf, &p("time"))?;
        let h0 = g.add(hx, ht)?;
        let h = g.silu(h0)?;
        let tok = g.reshape(h, vec![b, nt, td])?;

        let q = linear(g, tok, &p("q"))?;
        let k = linear(g, cond.rows, &p("k"))?;
        let v = linear(g, cond.rows, &p("v"))?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (td as f64).sqrt())?;
        let mut keep = Vec::with_capacity(b * nt * l);
        for bi in 0..b {
            for _ in 0..nt {
                keep.extend_from_slice(&cond.keep[bi * l..(bi + 1) * l]);
            }
        }
        let attn = g.softmax_last(scores, Some(keep))?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = linear(g, ctx, &p("o"))?;
        let tok2 = g.add(tok, ctx)?;

        let flat = g.reshape(tok2, vec![b, cfg.hidden])?;
        let m = linear(g, flat, &p("mid"))?;
        let m = g.silu(m)?;
        let z = g.add(flat, m)?;
        let out = linear(g, z, &p("out"))?;

        let table = g.param(&p("skip"))?;
        let mut idx = Vec::with_capacity(b);
        for &ti in t {
            if ti == 0 || ti > cfg.steps {
                return Err(GraphError::Index {
                    op: "timestep",
                    index: ti,
                    bound: cfg.steps + 1,
                });
            }
            idx.push(ti - 1);
        }
        let gain = g.gather(table, &idx, vec![b, 1, 1])?;
        let ab: Vec<f64> = idx.iter().map(|&i| self.alpha_bar[i]).collect();
        let inv_sd = g.constant(Tensor::new(vec![b, 1, 1], ab.iter().map(|a| 1.0 / (1.0 - a).sqrt()).collect())?)?;
        let gain = g.mul(gain, inv_sd)?;
        let x3 = g.reshape(x, vec![b, 1, cfg.image_dim])?;
        let pass = g.batch_matmul(gain, x3, false)?;
        let k = g.constant(Tensor::new(vec![b, 1, 1], ab.iter().map(|a| -(a / (1.0 - a)).sqrt()).collect())?)?;
        let out3 = g.reshape(out, vec![b, 1, cfg.image_dim])?;
        let head = g.batch_matmul(k, out3, false)?;
        let eps = g.add(pass, head)?;
        g.reshape(eps, vec![b, cfg.image_dim])
    }
}
