//! Synthetic data, staged training, checkpoints and evaluation for the
//! feature-augmented splatting model, plus the `featsplat` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod run;
pub mod synth;
pub mod train;

pub use config::{PipelineConfig, Preset};
pub use error::{Error, Result};
