//! Accent-robust CTC speech recognition at desk scale.
//!
//! A self-contained stack: a small reverse-mode autodiff engine with a
//! gradient-reversal node ([`nn`]), CTC loss and metrics ([`ctc`]), a
//! transformer CTC encoder with intermediate CTC taps and an accent
//! classifier ([`model`]), labeled and extracted accent embeddings
//! ([`embeddings`]), LDA/t-SNE/accent-remap analysis ([`analysis`]), a
//! synthetic multi-accent corpus ([`synth`]), and the training/evaluation
//! driver ([`experiment`]).

pub mod analysis;
pub mod ctc;
pub mod embeddings;
mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
