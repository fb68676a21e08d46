//! Small building blocks shared by every network in the crate.

use super::graph::{Graph, GraphError, Var};
use super::params::{ParamError, ParamStore};
use super::rng::RngStream;
use super::tensor::Tensor;

/// Registers `<prefix>.w` (`[fan_in, fan_out]`, N(0, gain²/fan_in)) and a zero
/// bias `<prefix>.b`.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    stream: &mut RngStream,
) -> Result<(), ParamError> {
    let std = gain / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| std * stream.normal()).collect();
    store.insert(format!("{prefix}.w"), Tensor::from_parts(vec![fan_in, fan_out], w), false)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]), false)?;
    Ok(())
}

/// `x · W + b` over the last axis of `x`.
pub fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, GraphError> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// Registers a `[rows, cols]` matrix with N(0, std²) entries.
pub fn init_normal(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    stream: &mut RngStream,
) -> Result<(), ParamError> {
    let w = (0..rows * cols).map(|_| std * stream.normal()).collect();
    store.insert(name, Tensor::from_parts(vec![rows, cols], w), false)
}
