//! Spatio-temporal transformer for lifting 2D human pose sequences to 3D.
//!
//! The crate is `no_std` (it only needs `alloc`) and carries everything that
//! is pure computation:
//!
//! * [`tensor`] / [`autodiff`]: a small dense tensor type and a define-by-run
//!   reverse-mode differentiation tape with the primitives the model needs.
//! * [`model`]: the transformer itself, a spatial stage with cross-joint
//!   interaction and a temporal stage with cross-frame interaction, followed
//!   by a frame-pooling regression head.
//! * [`data`]: skeleton metadata, sequence records, the synthetic sequence
//!   generator, receptive-field windowing and horizontal flipping.
//! * [`metrics`]: MPJPE, P-MPJPE (similarity Procrustes), PCK and AUC.
//! * [`train`]: differentiable MPJPE loss, Adam, the learning-rate schedule,
//!   the epoch loop and the evaluation driver.
//!
//! File formats, configuration files and the command line live in the
//! companion `crossformer` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};

pub use tensor::Tensor;
