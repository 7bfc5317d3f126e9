//! Streaming encoder-decoder transducer with cumulative attention.
//!
//! The decoder's single cross-attention layer accumulates sigmoid-weighted
//! encoder values frame by frame; a trainable halting selector decides when
//! the accumulated context is sufficient to emit the next token. All heads of
//! the layer share one halting position per step.
//!
//! Modules, bottom up:
//! - [`numerics`]: tensors, reverse-mode tape, gradient checking
//! - [`attention`]: dot-product / multi-head attention, sigmoid energies, chunk masks
//! - [`cumulative`]: interim contexts, halting selector, training and inference paths
//! - [`baseline`]: MoChA- and HS-DACS-style halting rules for comparison
//! - [`model`]: toy streaming Transformer, training, streaming decode, checkpoints
//! - [`harness`]: synthetic aligned data, corpus latency, experiment driver

pub mod attention;
pub mod baseline;
pub mod cumulative;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
