//! Finite-element toolkit for the electrical impedance tomography inverse
//! problem: disk meshing, Dirichlet-to-Neumann forward maps, truncated
//! L-BFGS reconstruction, phantom dataset generation, and image metrics.

pub mod blob;
pub mod error;
pub mod fem;
pub mod mesh;
pub mod metrics;
pub mod parallel;
pub mod dataset;
pub mod phantom;
pub mod raster;
pub mod inverse;
pub mod lbfgs;
pub mod skyline;

pub use error::{CoreError, Result};
