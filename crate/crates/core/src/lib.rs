//! Group activity detection: a token-conditioned reasoning decoder, cascaded
//! grouping transformers, dual-alignment fusion, set-matching losses and the
//! group detection metrics, on top of a small reverse-mode autodiff core.
//!
//! Model code is generic over [`Scalar`]; the aliases below fix the two
//! supported precisions. Training and verification use `f64`.

pub mod checkpoint;
pub mod error;
pub mod gad;
pub mod gradcheck;
pub mod loss;
pub mod mdaf;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reasoning;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
