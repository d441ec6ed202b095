//! Pruned transformer segmentation on a small reverse-mode autograd engine.

pub mod attention;
pub mod autograd;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod grpe;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
