//! Open-domain-generalization classifier built on frozen dual encoders.
//!
//! Domain-aware prompts feed a prompt-differential latent image that is
//! classified over the known classes plus an extra "unknown" class trained
//! on synthesized pseudo-open images.

pub mod config;
pub mod datasets;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod latentspace;
pub mod model;
pub mod objectives;
pub mod opengen;
pub mod pixels;
pub mod promptspace;
pub mod tape;

pub use error::{OdgError, Result};
