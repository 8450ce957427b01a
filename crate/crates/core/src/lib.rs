//! Sequential MRI phase-encode selection.
//!
//! A light-weight transformer Q-network scores every not-yet-acquired phase
//! encode of a slice from its current undersampled reconstruction and the
//! record of acquired phases. It is trained with double deep Q-learning,
//! rewarding the SSIM gain of the inverse-FFT reconstruction after each
//! acquisition.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the `f32` working precision.

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod dqn;
pub mod env;
pub mod error;
pub mod kspace;
pub mod metrics;
pub mod num;
pub mod phantom;
pub mod transformer;

pub use error::{Error, Result};
pub use num::Scalar;
pub use rustfft::num_complex::Complex;

pub type ComplexImage = kspace::ComplexImage<f32>;
pub type KSpaceMatrix = kspace::KSpaceMatrix<f32>;
pub type RealImage = kspace::RealImage<f32>;
pub type Environment = env::Environment<f32>;
pub type AcquisitionState = env::AcquisitionState<f32>;
pub type Tensor = autodiff::Tensor<f32>;
pub type PTParams = transformer::PTParams<f32>;
pub type PhaseTransformer = transformer::PhaseTransformer<f32>;
pub type Transition = env::Transition<f32>;
pub type ReplayBuffer = dqn::ReplayBuffer<f32>;
