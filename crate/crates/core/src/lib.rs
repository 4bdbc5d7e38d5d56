//! Desk-scale DDIM inversion lab with dynamic classifier-free guidance scales.
//!
//! Analytic Gaussian-mixture noise predictors stand in for a trained denoiser, so every
//! quantity along an inversion/sampling round trip is exact and reproducible.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod oracle;
pub mod parallel;
pub mod param;
pub mod pipeline;
pub mod restore;
pub mod rng;
pub mod schedule;
pub mod theoremlab;

pub use error::{Error, Result};
