//! Minimal reverse-mode differentiation for the density estimator.

mod params;
pub mod special;
mod tape;
mod tensor;

pub use params::{AdamConfig, OptimizerState, ParamId, ParamStore, StoreCheckpoint, TensorEntry};
pub use tape::{softplus, Tape, Var};
pub use tensor::{neumaier_sum, CompensatedSum, Segments, SparseMatrix, Tensor};
