//! Masked spectrogram modeling core.
//!
//! Pipeline: WAV audio -> log-mel spectrogram -> patch grid with random or
//! patterned masking -> transformer encoder over visible patches -> shallow
//! decoder reconstructing masked patches. Trained checkpoints feed the
//! feature extractor, linear/MLP probes, and the reconstruction and
//! attention visualizers.

pub mod downstream;
pub mod error;
pub mod features;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pretrain;
pub mod tensorfile;
pub mod rng;
pub mod viz;

pub use error::{Error, Result};
