//! Masked autoencoder pre-training for hyperspectral cubes.
//!
//! Cubes are split into 9×9-pixel × 8-band tokens, embedded with a learned
//! projection plus spatial and wavelength encodings, and reconstructed by a
//! transformer encoder/decoder from a dual spatial/spectral mask. The
//! objective mixes masked-voxel MSE with the per-pixel spectral angle.

pub mod checkpoint;
pub mod error;
pub mod hsidata;
pub mod loss;
pub mod masking;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
