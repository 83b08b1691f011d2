//! Desk-scale latent video diffusion for sub-stitch suturing clips.

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod params;
pub mod video;

pub use error::{Error, Result};
