//! Experiment harness around `xcnn-core`: dataset files, checkpoints,
//! image output, significance tests, the sparsity sweep and the `xcnn`
//! command-line tool.
//!
//! The split follows one rule — everything that opens a file or talks to the
//! OS lives here; all numerics stay in the core crate.

pub mod archfile;
pub mod checkpoint;
pub mod cli;
pub mod cifar;
pub mod error;
pub mod harness;
pub mod ppm;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
