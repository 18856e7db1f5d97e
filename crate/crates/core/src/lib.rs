//! Stochastic filter groups for multi-task CNNs.
//!
//! The crate is organised around a small f64 autodiff engine (`tensor`),
//! the grouping distribution machinery (`concrete`), the SFG convolution
//! layer and its feature routing (`sfg`), the variational training
//! objective (`objective`), scaled-down reference architectures and
//! baselines (`zoo`), deterministic synthetic two-task datasets (`data`),
//! the training loop and metrics (`train`), and analysis tooling plus the
//! experiment configuration (`analysis`, `config`). Model parameters
//! round-trip through the `checkpoint` archive format.

pub mod analysis;
pub mod checkpoint;
pub mod concrete;
pub mod config;
pub mod data;
pub mod objective;
pub mod sfg;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use tensor::{Tensor, TensorError};

/// Crate-wide error type for everything above raw tensor math.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
