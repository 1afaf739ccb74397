//! Weight watermarks for convolutional networks.
//!
//! A `T`-bit payload is embedded into the filter mean of one convolution
//! layer by adding a binary cross-entropy regularizer to the training loss,
//! and read back by projecting the filter mean with a secret key matrix.
//! The crate bundles the training engine, key generation and extraction,
//! attack simulations (fine-tuning, pruning, overwriting, distillation),
//! datasets and file formats.

pub mod attacks;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod persistence;
pub mod record;
pub mod rng;
pub mod stats;
pub mod watermark;

pub use error::{Error, Result};
