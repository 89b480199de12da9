//! Frequency-domain token mixing, contrastive image-text age estimation and
//! an ensemble error corrector, built on a small reverse-mode tensor engine.

pub mod clip;
pub mod correction;
pub mod error;
pub mod fourier;
pub mod fourierformer;
pub mod gradsuite;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod pipeline;

pub use error::{Error, ErrorCategory, Result};
