//! Simulation and reconstruction toolkit for single-pixel compressive
//! imaging with a coherent monochromatic source.
//!
//! The forward chain is: binary amplitude object -> zero-phase field ->
//! angular-spectrum propagation -> intensity -> differential Walsh–Hadamard
//! encoding -> bucket-detector readings. Reconstruction runs either a
//! classical method ([`classical`]) or an untrained convolutional generator
//! optimized through the same physical chain ([`prior`]).

pub mod classical;
pub mod encoding;
pub mod error;
mod fft;
pub mod field;
pub mod io;
pub mod measurement;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod propagation;
pub mod scene;

pub use error::{Error, Result};
pub use field::{ComplexField, IntensityImage, RealGrid};
pub use encoding::{Ordering, PatternSet};
pub use measurement::Measurement;
pub use propagation::{EvanescentPolicy, PropagationSpec};
