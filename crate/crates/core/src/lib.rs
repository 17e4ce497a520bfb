//! Self-refining image-to-report generation at desk scale.
//!
//! A small vision transformer encodes an image into patch embeddings, a
//! feed-forward mapper projects them into the word-embedding space of a
//! decoder-only causal language model, and the decoder generates a templated
//! report. Training combines the usual cross-entropy objective with a
//! self-refining alignment loss: generated-token embeddings are reconstructed
//! differentiably via Gumbel-Softmax, aggregated with the decoder's last-layer
//! attention, and pulled toward the pooled image representation.
//!
//! Everything runs on a from-scratch `f64` tape autodiff engine
//! ([`tape::Tape`]) so that every gradient can be checked against finite
//! differences.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod mapper;
pub mod model;
pub mod refine;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vision;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
