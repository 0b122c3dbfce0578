//! Desk-scale multi-subject grounded diffusion.
//!
//! A small f64 autodiff engine hosts a toy latent-diffusion denoiser whose
//! cross-attention layers take text tokens plus per-subject image tokens.
//! Subject tokens come from a grounding resampler and are confined to their
//! boxes by masked attention.

pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub(crate) mod layers;
pub mod model;
pub mod optim;
pub mod palette;
pub mod params;
pub mod resampler;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::sinusoidal;
