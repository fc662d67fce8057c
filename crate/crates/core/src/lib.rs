//! Two-pathway global/local generative adversarial network for frontal face
//! synthesis.
//!
//! The generator rotates a profile face to a frontal view with a global
//! encoder/decoder fused with four landmark-located patch networks. Training
//! combines multi-site pixel, symmetry, adversarial, identity-preserving and
//! total-variation terms. A procedural face renderer supplies paired data and
//! [`evalkit`] runs rank-1 identification on synthesized frontals.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod discriminator;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod geometry;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};

/// Side length of every full-face image.
pub const IMAGE_SIZE: i64 = 128;
/// Dimension of the bottleneck identity vector.
pub const IDENTITY_DIM: i64 = 256;
/// Dimension of the Gaussian noise concatenated at the bottleneck.
pub const NOISE_DIM: i64 = 100;
