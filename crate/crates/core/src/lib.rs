//! Proposal-free temporal action detection: a shared self-attention snippet
//! embedding feeding two parallel streams (snippet classification and
//! per-anchor temporal masks), boundary refinement between the streams,
//! self-supervised pre-training, pseudo-label fine-tuning, and the
//! decode/evaluation stack.

pub mod config;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod refine;
pub mod semisup;
pub mod train;

pub use error::{Error, Result};
