//! Singing-quality assessment: pitch histograms, spectral features, MOS
//! predictor heads with bias correction and fusion, and the usual
//! utterance/system-level evaluation metrics.

pub mod audio;
pub mod bias;
pub mod error;
pub mod features;
pub mod framing;
pub mod fusion;
pub mod heads;
pub mod manifest;
pub mod metrics;
pub mod model_file;
pub mod pipeline;
pub mod pitch;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
