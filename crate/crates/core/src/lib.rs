//! Convolutional network building blocks with exact forward and backward
//! modes over `H x W x C x N` tensors, DAG backpropagation, receptive-field
//! geometry and a small SGD trainer.

// NaN must fail `!(x > 0.0)` style parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod act;
pub mod conv;
pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod loss;
pub mod model;
pub mod norm;
pub mod pdist;
pub mod pool;
pub mod resample;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testing;

pub use conv::{ConvGeom, ConvTransposeGeom, FilterBank};
pub use error::{Error, Result};
pub use loss::LossKind;
pub use pool::{PoolGeom, PoolMode};
pub use tensor::{Matrix, Scalar, Shape, Tensor};
