//! Desk-scale scene-text recognizer built around two ideas: a pyramid
//! encoder whose early attention blocks are attenuated by a spatial decay
//! matrix, and a contrastive loss that pulls decoded character features
//! toward trainable per-class memory units.
//!
//! Everything runs on a small f64 tensor library with reverse-mode
//! differentiation (no external ML framework), so every gradient path is
//! checkable against finite differences.

pub mod error;
pub mod tensor;
pub mod tape;
mod ops;
pub mod grid;
pub mod decay;
pub mod rotary;
pub mod vocab;
pub mod config;
pub mod layers;
pub mod encoder;
pub mod decoder;
pub mod loss;
pub mod model;
pub mod pgm;
pub mod corpus;
pub mod optim;
pub mod checkpoint;
pub mod train;
pub mod eval;
pub mod metrics;
pub mod ablate;
pub mod gradcheck;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;
