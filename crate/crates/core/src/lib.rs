//! Training-free multi-concept compositing on top of an edit-friendly DDPM
//! inversion.
//!
//! A background latent is cloned once per concept plus once for the output.
//! Each reference clone borrows appearance from its concept through guided
//! attention, and the output trajectory is driven by noise stitched together
//! through the object masks, so the background region replays its own
//! inversion exactly.

pub mod attention;
pub mod blending;
pub mod cli;
pub mod container;
pub mod error;
pub mod inversion;
pub mod masks;
pub mod pipeline;
pub mod predictor;
pub mod scene;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, LatentTensor, Shape};
