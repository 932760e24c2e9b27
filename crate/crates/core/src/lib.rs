//! Image prompting for diffusion models through self-attention key/value
//! injection, at desk scale.
//!
//! The crate trains a tiny class-conditional attention denoiser over
//! 16×16 pixel images, inverts an image prompt with deterministic DDIM,
//! and regenerates from AdaIN-initialised noise while injecting the
//! prompt stream's keys and values (replacement, concatenation or
//! stratified attention) under configurable classifier-free guidance
//! wiring.

pub mod attention;
pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod sampler;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
