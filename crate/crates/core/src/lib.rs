//! Wisteria: a DNA language model that fuses dilated gated convolutions with
//! bidirectional selective state-space blocks, refines them with gated MLPs
//! and finishes with a Fourier-position attention layer.
//!
//! The crate is self-contained: [`tensor`] provides the f64 autograd
//! substrate, [`data`] the FASTA/tokenization/masking pipeline, [`ssm`] and
//! [`blocks`] the layers, [`model`] assembly and checkpoints, [`train`] the
//! masked-LM training loop and [`eval`] the analysis harness.

pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
