//! Align-free pronunciation assessment: a speech encoder and modality adapter feed a frozen
//! decoder LM that writes either a transcript or an `accuracy:A fluency:F` score string.

pub mod adapter;
pub mod align;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
