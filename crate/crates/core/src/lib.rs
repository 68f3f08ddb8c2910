//! AttnPAFPN: a path-aggregation feature pyramid whose CSP blocks host
//! efficient-global or local-window self-attention, together with the toy
//! backbone, anchor-free head, synthetic data and training loop needed to
//! exercise it end to end on a CPU.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! two instantiations used in practice.

pub mod attention;
pub mod audit;
pub mod blocks;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod neck;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flops::FlopCount;
pub use scalar::Scalar;
pub use tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};

/// Training/inference precision.
pub type Tensor32 = Tensor<f32>;
/// Finite-difference replay precision.
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
