//! Saliency-guided 3D U-Net segmentation of CT volumes.

pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preproc;
pub mod saliency;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use volume::{Geometry, Mask3, Volume3};
