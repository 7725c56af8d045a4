//! Attention-based detection and localization of digitally manipulated
//! images, end to end at desk scale.
//!
//! The crate bundles a deterministic reverse-mode autodiff engine
//! ([`tape`]), a pluggable attention layer with direct-regression and
//! appearance-model variants ([`attention`]), the combined training
//! losses ([`losses`]), ground-truth mask derivation ([`masks`]),
//! detection and localization metrics ([`metrics`]), a procedural
//! synthetic dataset generator ([`synthgen`]), and the trainable
//! classifier itself ([`model`], [`train`]).

pub mod attention;
pub mod container;
pub mod error;
pub mod image;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Pcg32;
pub use tensor::Tensor;
