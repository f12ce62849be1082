//! Minimal reverse-mode autodiff kernel plus the two learned correction
//! operators (residual CNN and conditional denoising diffusion model) used
//! to sharpen truncated L-BFGS reconstructions.

pub mod checkpoint;
pub mod ddpm;
pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod resnet;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{NnError, Result};
