//! Query-conditioned Laplacian temporal attention over irregular clinical
//! event streams, with plateau-Gaussian soft labels, a training and
//! evaluation harness, a seeded synthetic cohort generator, and receptive
//! field analysis of learned attention parameters.

pub mod attention;
pub mod embeddings;
pub mod error;
pub mod events;
pub mod experiment;
pub mod horizon;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
