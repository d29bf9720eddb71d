//! Latent-space semantic editing for toy diffusion transformers.
//!
//! The crate provides a VP diffusion substrate, a structured text codec,
//! three denoisers (a closed-form Gaussian factor model and two tiny
//! attention models), score-distillation direction search, the
//! encode / identify / manipulate edit pipeline, disentanglement and
//! image-quality metrics, attention probing, and Monte-Carlo checks of the
//! concentration and orthogonality results the editing relies on.

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod train;
pub mod text;
pub mod theory;

pub use error::{Error, Result};
