//! Masked-diffusion framework for urban region profiling.
//!
//! The crate models a city as a set of regions, each carrying an embedding
//! and scalar profile values (point-of-interest densities, mobility flows,
//! socioeconomic indicators). A denoising-diffusion transformer is pretrained
//! to reconstruct randomly masked profile entries from the observed ones;
//! at inference time the same network fills in unknown regions for a new
//! profile without any fine-tuning, conditioning only on the values it is
//! shown.

pub mod diffusion;
pub mod error;
pub mod model;
pub mod analysis;
pub mod infer;
pub mod region;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
