//! Deep-image-prior denoising with Monte-Carlo dropout uncertainty,
//! Langevin-dynamics baselines, and image-quality and calibration metrics.
//!
//! The modules build on each other: [`tensor`] provides the autodiff engine,
//! [`netgen`] the generator network, [`optim`] the update rules, [`noise`]
//! image I/O and corruption, [`engines`] the training and prediction loops,
//! and [`metrics`] the evaluation.

pub mod engines;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod netgen;
pub mod noise;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
