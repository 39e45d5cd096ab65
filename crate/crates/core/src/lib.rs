//! Continual self-supervised learning with branch expansion and compression.
//!
//! Every convolution can be widened with a parallel, zero-initialised branch
//! that alone receives gradient while the original kernel is held behind a
//! stop-gradient. After training on a task the branch is zero-padded to the
//! base kernel size and summed into it, which leaves the network function
//! unchanged and its structure identical to the original.
//!
//! The numeric stack is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the common instantiations.

pub mod branch;
pub mod checkpoint;
pub mod cka;
pub mod continual;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod ssl;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
