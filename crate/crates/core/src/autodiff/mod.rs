//! Minimal reverse-mode automatic differentiation over 2D `f64` tensors.

mod graph;
pub mod nn;
mod params;
mod sparse;
mod tensor;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use params::{Adam, AdamConfig, ParamStore, Session};
pub use sparse::RowMap;
pub use tensor::Tensor;
