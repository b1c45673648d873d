//! Optimization engine for printable multi-view illusions.
//!
//! A set of *prime* images is optimized so that fixed, physically realizable
//! arrangements (flipping, rotating transparencies, stacking transparencies in
//! front of a backlight) produce *derived* images that each match their own
//! text prompt or target image.
//!
//! The crate is organized bottom-up:
//!
//! - [`image`]: the dense RGB image container shared by every module.
//! - [`parametric_image`]: differentiable prime-image representations
//!   (Fourier-feature MLPs and raw pixel grids).
//! - [`arrangements`]: the arrangement operators and their vector-Jacobian
//!   products.
//! - [`guidance`]: the frozen denoiser interface, noise schedule and
//!   image-to-image refresh.
//! - [`losses`]: score distillation, SSIM and the dream-target loss.
//! - [`targets`]: per-derived-image prompts, static targets and target refresh.
//! - [`optimizer`]: the two-phase training loop with checkpoint/resume.
//! - [`evaluation`]: prompt protocol, controllability, Vendi and independence
//!   scores.
//! - [`fabrication`]: viewing simulation and print-sheet export.

pub mod arrangements;
pub mod error;
pub mod evaluation;
pub mod fabrication;
pub mod guidance;
pub mod image;
pub mod losses;
pub mod optimizer;
pub mod parametric_image;
mod serde_f64;
pub mod targets;

pub use error::{Error, Result};
pub use image::RgbImage;
