//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

pub mod cells;
pub mod gradcheck;
mod graph;
pub mod io;
pub mod suite;
mod linalg;
mod params;
mod tensor;

pub use graph::{broadcast_shape, sigmoid, BinaryOp, Graph, Padding, UnaryOp, Var};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;
