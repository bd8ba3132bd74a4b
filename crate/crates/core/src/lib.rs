//! Urban area embeddings learned from stay patterns.
//!
//! The pipeline runs stays -> privacy-filtered mesh aggregation -> 168-class
//! count vectors -> an 8-dimensional softmax embedding, optionally anchored so
//! that separately trained datasets share one latent space.

pub mod aggregate;
pub mod analysis;
pub mod anchoring;
pub mod embedding;
pub mod error;
pub mod io;
pub mod mesh;
pub mod stay;
pub mod synth;

pub use error::{Error, Result};
