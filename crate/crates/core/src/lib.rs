//! Differentiable speech-quality objectives.
//!
//! Scale-invariant SDR, a PESQ-style quality objective and an STOI-style
//! intelligibility objective, each evaluated on time-domain waveforms with an
//! exact analytic gradient, plus the STFT plumbing, oracle spectral masks and
//! a gradient-ascent mask refiner that ties them together.

pub mod error;
pub mod grad;
pub mod mask;
pub mod multitask;
pub mod pesq;
pub mod report;
pub mod sdr;
pub mod signal;
pub mod stft;
pub mod stoi;
pub mod synth;

pub use error::{Error, Result};

/// Additive stabilizer used by every division and logarithm in the loss
/// pipelines.
pub const EPSILON: f64 = 1e-12;
