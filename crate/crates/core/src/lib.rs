//! Reference-conditioned video tokenizer.
//!
//! Clips are split into unquantized reference frames and target frames. Both
//! are patchified and encoded jointly under a one-way attention mask; only the
//! target tokens pass through the vector-quantization bottleneck, and the
//! decoder reconstructs targets from those codes plus the continuous
//! reference tokens.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod error;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patchgrid;
pub mod refdecoder;
pub mod refencoder;
pub mod trainer;
pub mod vq;

pub use error::{Error, Result};
pub use candle_core::DType;
