//! Piecewise constant latent variables for variational autoencoders, with a
//! neural variational document model built on a small reverse-mode tape.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod nvdm;
pub mod param;
pub mod piecewise;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use nvdm::{ModelConfig, NvdmModel, Variant};
