//! Knowledge-aware scene-text image classification.
//!
//! Scene-text strings are tokenized, linked to knowledge-base entities and
//! encoded with knowledge-aware re-contextualization; the resulting text
//! representation is fused with a global visual feature by a visual-context
//! attention module and classified.

pub mod autograd;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod params;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
pub mod vkac;
pub mod vision;

pub use error::{Error, Result};
