//! Privileged-modality knowledge transfer for wearable stress detection.

pub mod autodiff;
pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod signal;
pub mod train;

pub use error::{PulseError, Result};
