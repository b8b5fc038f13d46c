//! Joint pose and shape refinement of object instances in stereo images,
//! using a PCA shape space over signed distance grids.

pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod oracle;
pub mod photometric;
pub mod priors;
pub mod sampling;
pub mod sdf;
pub mod shape;
pub mod silhouette;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
