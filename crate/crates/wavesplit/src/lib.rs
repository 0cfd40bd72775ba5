//! Sound field decomposition toolkit.
//!
//! Reconstructs a source-containing sound field from boundary microphone
//! pressures by decomposing it into point sources. Ships a two-stage
//! neural pipeline (sound-field separator + single-source localizer), a
//! gridded sparse baseline built on orthogonal matching pursuit, and a
//! simulation/evaluation harness.
//!
//! The numeric core is generic over the scalar type (see [`scalar::Scalar`]);
//! `f64` aliases below are the defaults used by the CLI and the harness.

pub mod acoustics;
pub mod engine;
pub mod evaluation;
pub mod io;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod sparse;
pub mod training;

pub use scalar::{Point3, Scalar};

/// Default scalar for the CLI and harness.
pub type Real = f64;

pub type Tensor64 = engine::Tensor<f64>;
pub type Tensor32 = engine::Tensor<f32>;
pub type Point64 = Point3<f64>;
pub type Complex64 = num_complex::Complex<f64>;
pub type PressureVector64 = acoustics::PressureVector<f64>;
pub type MicArray64 = acoustics::MicArray<f64>;
pub type Wavenumber64 = acoustics::Wavenumber<f64>;
pub type PointSource64 = acoustics::PointSource<f64>;
