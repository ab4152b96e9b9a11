//! Retrieval-augmented neural field for upsampling sparse HRTF measurements.
//!
//! A listener measured on a few directions is matched against a database of
//! fully measured subjects; the closest subjects' responses at each desired
//! direction drive a network whose subject-specific low-rank vectors are
//! fitted to the measurements. See the `book/` guide for a walkthrough.

pub mod baselines;
pub mod bundle;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ranf_model;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// The guide's chapters, compiled and run as doc-tests so the book stays in
/// step with the code.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/signals.md")]
    pub mod signals {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub mod retrieval {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
