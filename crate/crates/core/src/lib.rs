//! Pluggable converters for a frozen toy text-to-image diffusion transformer.
//!
//! A small DiT is pretrained for text-to-image generation, frozen, and then
//! extended with learnable converter blocks and a channel-doubled patch
//! embedding so the same weights also predict depth or surface normals from
//! an RGB image. Skipping the converters restores the generator bit for bit.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod converters;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod scenes;
pub mod schedule;
pub mod tasks;
pub mod trainer;

// links the system BLAS behind the GEMM calls
extern crate openblas_src;

pub use error::{Error, Result};
