//! Small-dataset synthesis of fetal ultrasound brain planes.
//!
//! Two generation pipelines share the data, evaluation and checkpoint
//! plumbing in this crate:
//!
//! * **DSR-GAN**: a low-resolution denoising diffusion model ([`diffusion`]),
//!   histogram matching against the real intensity distribution
//!   ([`imageops`]) and a ×2 super-resolution GAN ([`superres`]).
//! * **TB-GAN**: a style-modulated generator built from window attention
//!   blocks, trained with differentiable augmentation and adaptive pseudo
//!   augmentation ([`tbgan`]).
//!
//! Both are scored with the Fréchet distance between feature statistics
//! ([`metrics`]) and orchestrated by [`trainer`].

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod imageops;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod superres;
pub mod tbgan;
pub mod trainer;

pub use batch::ImageBatch;
pub use error::{Error, Result};
