//! Stochastic attention head removal for Transformer and Conformer
//! sequence-to-sequence models, together with the attention diagnostics used
//! to study head redundancy (diagonality, static pruning plans, inter-head
//! similarity) and the usual WER and significance tooling.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root
//! name the double-precision instantiations used by the CLI and the persisted
//! formats.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod objectives;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tasks;
pub mod training;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Model64 = model::Model<f64>;
pub type Dataset64 = tasks::Dataset<f64>;
