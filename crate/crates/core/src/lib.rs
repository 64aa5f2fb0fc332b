//! Semi-supervised self-growing GAN training at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, parsers for the
//! layer notation used to describe networks, kernel MMD, the (k+1)-class
//! discriminator loss, function-preserving network growth, and the staged
//! training loop with threshold-based label inference.

pub mod autograd;
pub mod cbt;
pub mod data_io;
pub mod error;
pub mod mmd;
pub mod model;
pub mod netspec;
pub mod ssl_loss;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, ParamId, ParamStore, Parameter, Tensor};
