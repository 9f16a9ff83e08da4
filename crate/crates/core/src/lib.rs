//! Hybrid transformer-sequencer image classifier.
//!
//! A from-scratch stack for a ViT-style patch-attention encoder feeding a
//! batch-normalized BiLSTM "sequencer" and dense heads: a dense tensor core
//! with reverse-mode differentiation, the model blocks, a rectified-Adam
//! training loop with plateau/early-stop callbacks, the manifest-driven data
//! pipeline, and a k-fold evaluation harness.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Gradients, NodeId, Tape, TapeError};
pub use tensor::{Dtype, Element, Tensor, TensorError};
