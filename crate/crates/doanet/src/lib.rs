//! DoA estimation for an unknown number of simultaneous sources on a 6-mic
//! linear array.
//!
//! The crate covers the whole experiment loop:
//!
//! - [`dsp`]: STFT/iSTFT and WAV I/O.
//! - [`room`]: shoebox image-source simulation and seeded dataset generation.
//! - [`features`]: Mag+IPD input features, spatial-pseudo-spectrum (SPS)
//!   labels, per-source VAD and the angle-sorting branch assignment.
//! - [`nn`]: a small hand-differentiated neural stack (dense, GRU, layer
//!   norm, Adam with warm-up and gradient clipping).
//! - [`model`]: the MISO / MIMO model graphs built on complex ratio filters
//!   and per-frequency spatial covariance matrices, plus training.
//! - [`eval`]: both inference decoders, recall/precision/F1 scoring,
//!   threshold sweeps and the small-included-angle subset.
//! - [`config`] and [`pipeline`]: TOML-backed run configuration and the
//!   staged experiment pipeline behind the CLI.

pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod room;

pub use error::{Error, Result};
