//! Multi-domain capsule feature learning for condition-robust visual place
//! recognition.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the
//! pipeline runs in `f32` and the aliases below name those instantiations.

pub mod baseline;
mod binio;
pub mod capsule;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod matcher;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod separation;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
