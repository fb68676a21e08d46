use super::RewardError;
use crate::numcore::nn::{init_linear, linear};
use crate::numcore::{optimizer_step, AdamConfig, Graph, GraphError, OptimState, ParamStore, RngStream, Tensor, Var};
use crate::phantom::Image;

/// Minibatch schedule for fitting a reward model. The learning rate decays
/// linearly to a tenth of `lr` over the run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 64,
            lr: 1e-3,
        }
    }
}

/// Stacked perceptron `<prefix>.l0 … <prefix>.l{n-1}` with SiLU between
/// layers and a linear last layer.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        Self {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
        }
    }

    fn layer(&self, i: usize) -> String {
        format!("{}.l{i}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, stream: &mut RngStream) -> Result<(), RewardError> {
        for i in 0..self.widths.len() - 1 {
            init_linear(store, &self.layer(i), self.widths[i], self.widths[i + 1], 1.0, stream)?;
        }
        Ok(())
    }

    pub fn check(&self, store: &ParamStore) -> Result<(), RewardError> {
        for i in 0..self.widths.len() - 1 {
            for (suffix, shape) in [("w", vec![self.widths[i], self.widths[i + 1]]), ("b", vec![self.widths[i + 1]])] {
                let name = format!("{}.{suffix}", self.layer(i));
                let v = store.value(&name)?;
                if v.shape() != shape.as_slice() {
                    return Err(RewardError::Param(crate::numcore::ParamError::Shape {
                        name,
                        have: shape,
                        got: v.shape().to_vec(),
                    }));
                }
            }
        }
        Ok(())
    }

    /// Returns `(penultimate activations, output)`.
    pub fn forward_with_features(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var), GraphError> {
        let n = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n - 1 {
            let z = linear(g, h, &self.layer(i))?;
            h = g.silu(z)?;
        }
        let out = linear(g, h, &self.layer(n - 1))?;
        Ok((h, out))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, GraphError> {
        Ok(self.forward_with_features(g, x)?.1)
    }
}

pub(crate) fn image_matrix(images: &[&Image]) -> Tensor {
    let d = images.first().map_or(0, |i| i.pixels().len());
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), d], data).expect("consistent")
}

/// Shuffled minibatch training of every trainable entry in `store`.
/// `loss` builds the scalar objective for one batch of sample indices.
/// Incomplete trailing batches are dropped unless the whole set is smaller
/// than one batch.
pub(crate) fn fit_loop<F>(
    store: &mut ParamStore,
    n: usize,
    cfg: &FitConfig,
    stream: &mut RngStream,
    mut loss: F,
) -> Result<(), RewardError>
where
    F: FnMut(&mut Graph<'_>, &[usize]) -> Result<Var, GraphError>,
{
    if n == 0 {
        return Err(RewardError::EmptyTrainingSet);
    }
    let batch = cfg.batch.min(n).max(1);
    let per_epoch = n / batch;
    let total = (cfg.epochs * per_epoch).max(1);
    let mut optim = OptimState::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        stream.shuffle(&mut order);
        for chunk in order.chunks_exact(batch) {
            let grads = {
                let mut g = Graph::new(store);
                let l = loss(&mut g, chunk)?;
                g.backward(l)?
            };
            optim.config.lr = cfg.lr * (1.0 - 0.9 * step as f64 / total as f64);
            optimizer_step(store, &grads, &mut optim)?;
            step += 1;
        }
    }
    store.freeze_all();
    Ok(())
}
