//! Multi-contrast MRI super-resolution with a compact latent diffusion prior
//! and a large-window transformer.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod flops;
pub mod kspace;
pub mod model;
pub mod plwformer;
pub mod prior;
pub mod seed;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
