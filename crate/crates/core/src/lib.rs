//! Food-waste classification from before/after bin images: synthetic deposit
//! scenes, U-Net segmentation, mask-driven cropping and a delta-layer
//! classifier on frozen feature paths.

pub mod deltanet;
pub mod error;
pub mod harness;
pub mod preproc;
pub mod scenegen;
pub mod segnet;

pub use error::{Error, Result};
