//! Latent-space model stitching and reward alignment on a synthetic
//! multi-view world.

pub mod align;
pub mod config;
pub mod error;
pub mod eval;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod stitch;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
