//! Filter-guided diffusion.
//!
//! Steers the low-frequency structure of diffusion samples toward a guide
//! image by adding a filtered, adaptively weighted correction to the mean at
//! each reverse step. The denoiser is treated as a black box; closed-form
//! denoisers for Gaussian and template-mixture priors are included so the
//! whole pipeline can be checked exactly.

pub mod analysis;
pub mod denoisers;
pub mod error;
pub mod filters;
pub mod guidance;
pub mod image;
pub mod rng;
pub mod samplers;
pub mod schedule;

pub use error::{FgdError, Result};
pub use image::{ImageBuffer, Shape};
