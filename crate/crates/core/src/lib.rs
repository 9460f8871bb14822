//! Behavior classification from underwater audio with partial (superfluous)
//! labels.
//!
//! The pipeline runs recordings through energy-based segmentation,
//! resampling to 21,900 Hz, centered constant padding and a normalized
//! decibel Mel spectrogram, then trains a four-headed residual CNN with the
//! risk-consistent partial-label loss and scores it by candidate-set
//! accuracy under stratified Monte-Carlo cross-validation.
//!
//! ```text
//! wav -> segmenter -> resample -> pad -> spectrogram image -> nn -> pll loss
//!                                                        \-> eval (accuracy, baselines, CV)
//! ```

pub mod audio_io;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod framing;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod pll;
pub mod segmenter;
pub mod spectrogram;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
