//! Olfactory-visual multimodal deterioration classifier.
//!
//! The pipeline runs from a deterministic synthetic corpus ([`synth`]) through
//! the embedding constructor ([`fdec`]) and the recalibration network
//! ([`model`]) to training and evaluation ([`train`], [`metrics`]) and
//! Grad-CAM explanations ([`explain`]). All numerics sit on the small
//! reverse-mode engine in [`tensor`].

pub mod dataset;
pub mod error;
pub mod explain;
pub mod fdec;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Class names indexed by label.
pub const CLASS_NAMES: [&str; 3] = ["Expired", "Moldy", "Normal"];
pub const NUM_CLASSES: usize = 3;
/// Number of e-nose sensor channels.
pub const SENSOR_CHANNELS: usize = 10;
/// Seconds in one e-nose recording (sampled at 1 Hz).
pub const RECORDING_SECONDS: usize = 600;
