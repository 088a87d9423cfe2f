//! Microphone-invariant multichannel speech enhancement.
//!
//! The engine enhances noisy multichannel recordings captured by an ad-hoc
//! microphone array with an unknown number of microphones. One channel is
//! designated the reference; the network attends across channels, so the same
//! trained weights run on any channel count without retraining.
//!
//! Module map:
//!
//! * [`dsp`] - STFT/iSTFT, power compression, phase-difference features,
//!   Griffin-Lim phase refinement.
//! * [`nn`] - dense tensors plus a tape-based reverse-mode autodiff with the
//!   kernels the model needs (linear, layer norm, GRU, causal conv, attention).
//! * [`model`] - the three-stage attentive beamforming network: shared
//!   per-channel refinement, pair-wise alignment against the reference, and a
//!   single-channel post-refinement stage, with offline and streaming entry
//!   points.
//! * [`sim`] - image-method room simulation and dataset synthesis.
//! * [`beamform`] - oracle MVDR and delay-and-sum references.
//! * [`metrics`] - SI-SNR, STOI, log-spectral distance, manifest evaluation.
//! * [`train`] - spectral loss, AdamW, channel augmentation, a desk-scale
//!   training loop, and finite-difference gradient verification.
//! * [`audio`] - minimal RIFF WAV reader/writer (PCM16 and float32).

pub mod audio;
pub mod beamform;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sim;
pub mod train;
mod util;

pub use error::{Error, Result};
pub use nn::tensor::Tensor;
