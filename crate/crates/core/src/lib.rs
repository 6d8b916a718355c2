//! Activation steering for masked diffusion language models.
//!
//! A small bidirectional transformer denoiser, a masked-diffusion sampler,
//! and in-context latent refinement: at chosen layers and denoising steps
//! the generation's hidden states are pulled toward the locally pooled
//! hidden states of a reference sequence run through the same model.

pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod steering;
pub mod tokens;
pub mod toylab;

pub use error::{Error, Result};
