//! Weakly supervised object localization with context-aware two-stream networks.
//!
//! Images come with class labels only. Each candidate box is pooled three
//! ways (the box itself, a frame-shaped ring around it, and a ring inside
//! it) and scored by a classification stream and a localization stream whose
//! scores are softmaxed over boxes and multiplied together.

pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gradcheck;
pub mod geometry;
pub mod model;
pub mod pooling;
pub mod training;

pub use error::{Error, Result};
