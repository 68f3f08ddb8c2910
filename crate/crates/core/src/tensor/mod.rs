//! Deterministic NCHW tensor engine: values, parameters, the autodiff tape,
//! and the binary weight format.

mod graph;
pub mod kernels;
mod layers;
mod params;
mod value;
pub mod weights;

pub use layers::{ConvNormAct, ConvParams, ConvSpec, NormParams, NORM_EPS};
pub use graph::{Gradients, Graph, Var, GATHER_ZERO};
pub use params::{seeded_rng, ParamBuilder, ParamId, ParamStore};
pub use value::Tensor;
