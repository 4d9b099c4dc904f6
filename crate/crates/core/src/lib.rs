//! Learning linearized video representations.
//!
//! The crate provides a small dense-tensor core with reverse-mode automatic
//! differentiation, the phase-pooling operator pair, encoder/decoder
//! networks trained to predict the next frame by linear extrapolation in
//! code space, a latent correction variable inferred per sample by gradient
//! descent, and synthetic video generators to train and evaluate on.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod ltz;
pub mod model;
pub mod optim;
pub mod phase_pool;
pub mod tensor;
pub mod train;
pub mod uncertainty;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
