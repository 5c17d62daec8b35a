//! Explicit sentence compression (ESC) fused into a Transformer encoder-decoder.

pub mod error;
pub mod tensor;
pub mod tokenizer;
pub mod transformer;
pub mod fusion;
pub mod model;
pub mod checkpoint;
pub mod compression;
pub mod evaluation;
pub mod training;
pub mod synth;
pub mod config;
pub mod experiment;

pub use error::{Error, Result};
