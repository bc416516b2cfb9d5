//! Multimodal human-attention priors inside transformer co-attention for
//! visual question answering.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: dense tensors and a define-by-run autodiff tape.
//! * [`attention`]: multi-head attention with optional prior-modulated scores,
//!   wrapped in self-attention (SA) and guided-attention (GA) blocks.
//! * [`saliency`]: the trainable text-saliency network and the alignment of
//!   image saliency maps onto the feature grid.
//! * [`model`]: the encoder–decoder, attention reduction, fusion and answer
//!   head, plus parameter accounting and checkpoints.
//! * [`data`]: synthetic grid-world task, file formats, tokenisation and
//!   question-type classification.
//! * [`train`]: optimiser, metric, training loop and experiment harness.

pub mod attention;
mod binio;
pub mod data;
pub mod error;
pub mod model;
pub mod numcore;
pub mod params;
pub mod saliency;
pub mod train;

pub use error::{Error, Result};
