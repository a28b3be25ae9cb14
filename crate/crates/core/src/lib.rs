//! Gait feature fields.
//!
//! Dense per-frame features (for example latents from a pretrained diffusion
//! model) are condensed into 2-D direction fields by local softmax matching,
//! within a frame (static field) and across frames (dynamic field). A small
//! part-based recognition head fuses both fields into sequence embeddings,
//! trained with triplet and cross-entropy losses and evaluated by rank-k
//! retrieval.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gff;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod matching;
pub mod model;
pub mod params;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, FormatError, Result};
