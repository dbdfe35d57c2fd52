//! Formats, metrics, checkpoints and the command line that tie the modules
//! into runnable experiments.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod metrics;
