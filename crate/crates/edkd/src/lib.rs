//! Desk-scale encoder-decoder transformer distillation lab.
//!
//! The crate provides a minimal reverse-mode autodiff tensor engine
//! ([`tensor`]), an encoder-decoder transformer with activation capture
//! ([`model`]), relation-head attention distributions ([`relations`]),
//! distillation objectives ([`objectives`]), synthetic corpora and
//! span-corruption pipelines ([`data`]), an AdamW training/distillation
//! loop with chain orchestration ([`trainer`]), and gradient-norm
//! diagnostics ([`diagnostics`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod objectives;
pub mod relations;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
pub use tensor::{Tape, TensorId};

/// Crate-wide error type. Variants map onto CLI exit codes:
/// config errors exit 2, divergence exits 3, I/O exits 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] tensor::TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
