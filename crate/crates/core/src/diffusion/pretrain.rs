use super::denoiser::{ConditionBatch, Denoiser};
use super::{forward_noise, DiffusionError, DiffusionSchedule};
use crate::numcore::{optimizer_step, Graph, OptimState, ParamStore, RngStream, Tensor};
use crate::textcond::{encode_batch, TokenSeq};

pub struct PretrainItem<'a> {
    pub x0: &'a [f64],
    pub tokens: &'a TokenSeq,
}

/// Number of near-zero rows occasionally prepended to the report rows so
/// the network learns to tolerate extra condition rows before any are
/// trained.
const NULL_ROWS: usize = 3;

/// One noise-prediction step: per item a uniform timestep and a fresh
/// standard-normal ε, loss = mean over items and pixels of `(ε − ε̂)²`,
/// followed by one optimizer update of every trainable entry (denoiser and
/// report encoder). Returns the loss before the update.
pub fn pretrain_step(
    store: &mut ParamStore,
    den: &Denoiser,
    sched: &DiffusionSchedule,
    batch: &[PretrainItem<'_>],
    stream: &mut RngStream,
    optim: &mut OptimState,
) -> Result<f64, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let dim = den.cfg.image_dim;
    let b = batch.len();
    let mut ts = Vec::with_capacity(b);
    let mut xt = Vec::with_capacity(b * dim);
    let mut eps_all = Vec::with_capacity(b * dim);
    for item in batch {
        if item.x0.len() != dim {
            return Err(DiffusionError::Shape(vec![dim], vec![item.x0.len()]));
        }
        let t = stream.below(sched.steps()) + 1;
        let eps: Vec<f64> = (0..dim).map(|_| stream.normal()).collect();
        let x0 = Tensor::vector(item.x0.to_vec());
        let e = Tensor::vector(eps.clone());
        xt.extend_from_slice(forward_noise(&x0, t, &e, sched)?.data());
        eps_all.extend(eps);
        ts.push(t);
    }
    let with_null = stream.bernoulli(0.5);
    let null_rows: Vec<f64> = (0..NULL_ROWS * den.cfg.d_tau).map(|_| 0.02 * stream.normal()).collect();

    let (grads, loss) = {
        let mut g = Graph::new(store);
        let seqs: Vec<&TokenSeq> = batch.iter().map(|i| i.tokens).collect();
        let (rep, keep) = encode_batch(&mut g, &seqs)?;
        let prefix = if with_null {
            Some(g.constant(Tensor::new(vec![NULL_ROWS, den.cfg.d_tau], null_rows).expect("consistent"))?)
        } else {
            None
        };
        let cond = ConditionBatch::assemble(&mut g, prefix, rep, keep)?;
        let xv = g.constant(Tensor::new(vec![b, dim], xt).expect("consistent"))?;
        let eps_hat = den.eps_hat(&mut g, xv, &ts, &cond)?;
        let target = g.constant(Tensor::new(vec![b, dim], eps_all).expect("consistent"))?;
        let diff = g.sub(eps_hat, target)?;
        let sq = g.square(diff)?;
        let loss = g.mean(sq)?;
        let value = g.value(loss).item().expect("scalar");
        (g.backward(loss)?, value)
    };
    optimizer_step(store, &grads, optim)?;
    Ok(loss)
}
