//! Numeric substrate: tensors, reverse-mode differentiation, the
//! adaptive-moment optimizer and reproducible random streams.

mod graph;
pub mod nn;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{gradients_of, Gradients, Graph, GraphError, Var};
pub use optim::{optimizer_step, AdamConfig, Moments, OptimError, OptimState, DEFAULT_LR};
pub use params::{sha256_hex, Param, ParamError, ParamStore, Precision};
pub use rng::{gaussian_sample, rng_stream, RngStream};
pub use tensor::{Tensor, TensorError};
