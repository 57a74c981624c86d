//! Generation of 68-point facial keypoint sequences from audio and a single
//! reference frame.
//!
//! The pipeline: WAV audio becomes a log-mel spectrogram ([`audio`]);
//! keypoint files are base-point normalized and standardized
//! ([`keypoints`]); windows of both are paired into training samples
//! ([`dataset`]); a convolutional generator, a pose-invariant encoder and a
//! displacement discriminator ([`nn`]) are trained adversarially
//! ([`losses`], [`train`]) and evaluated with average L1 and PCK
//! ([`metrics`]).

pub mod audio;
pub mod error;
pub mod keypoints;

pub use error::{Error, Result};
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod train;
