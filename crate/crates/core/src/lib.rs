//! Desk-scale ERP brain-computer-interface pipeline.
//!
//! The crate covers the full offline/online path of a six-icon oddball
//! selection task: synthetic multi-channel EEG generation ([`synth`]),
//! a simulated wireless acquisition chain with a bit-exact recording
//! container ([`stream`]), band-pass filtering, epoching and two-step
//! trial rejection ([`preprocess`]), ERP feature extraction ([`features`]),
//! a random forest and a compact CNN trained per subject ([`models`]),
//! run-level icon aggregation and an online feedback simulation
//! ([`decode`]), training-set assembly with stratified cross-validation
//! ([`eval`]) and signal-quality statistics ([`quality`]).
//!
//! Numeric kernels are generic over [`scalar::Scalar`]; the two concrete
//! instantiations used by the pipeline are exposed as [`Sample`] and
//! [`Real`] below.

pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod preprocess;
pub mod quality;
pub mod scalar;
pub mod stream;
pub mod synth;
pub mod types;

pub use error::{Error, Result};

/// Scalar type of raw samples on the wire and in recording files.
pub type Sample = f32;

/// Scalar type used for filtering, features and statistics.
pub type Real = f64;

/// Acquisition sampling rate in Hz.
pub const SAMPLING_RATE_HZ: f64 = 500.0;

/// Sample period in seconds.
pub const SAMPLE_PERIOD_S: f64 = 1.0 / SAMPLING_RATE_HZ;
