//! Heart-rate estimation from single-channel wrist PPG.
//!
//! The crate covers the whole offline pipeline:
//!
//! - [`dataio`]: canonical recording manifests, windowed-dataset and weights containers.
//! - [`dsp`]: resampling, sliding windows, zero-phase Butterworth bandpass, per-subject z-scoring.
//! - [`groundtruth`]: R-peak detection on the reference ECG and per-window mean heart rate.
//! - [`autograd`]: a small reverse-mode differentiation tape with the primitives the network needs.
//! - [`model`]: the CNN + LSTM regression network, parameter accounting and block freezing.
//! - [`trainer`]: SGD training, cross-validation fold plans and the transfer-learning conditions.
//! - [`metrics`]: MAE, SDAE, PCC and evaluation reports.
//! - [`synth`]: paired synthetic PPG/ECG recordings with a planted heart-rate profile.
//! - [`prepare`]: recording → labelled, normalized windows.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod groundtruth;
pub mod metrics;
pub mod model;
pub mod prepare;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
