//! Multi-task disentanglement for generalizable forgery detection.
//!
//! Images are factorized into a content code and a forgery fingerprint whose two
//! halves carry method-specific and method-common evidence. Only the common half
//! is consulted at detection time.

pub mod backbone;
pub mod disentangler;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod synthforge;
pub mod trainer;

pub use error::{Error, Result};

/// Binary label of pristine images (also the method label of real images).
pub const LABEL_REAL: usize = 0;
/// Binary label of manipulated images.
pub const LABEL_FAKE: usize = 1;
