//! Diffeomorphic 3D image registration.
//!
//! A deformation is built as a composition of small velocity steps
//! `phi = (Id + v_1) ∘ (Id + v_2) ∘ …`, each velocity the minimiser of a
//! linearised brightness-constancy model with an n-th order smoothness
//! penalty, solved by Nesterov-accelerated ADMM whose sub-steps are all
//! closed form (point-wise shrinkage or Sherman–Morrison, plus one DFT solve).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the precision for the common cases.

pub mod admm;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod regularizer;
pub mod scalar;
pub mod synth;
pub mod volume;

pub use admm::{solve_velocity, DataTerm, SolverConfig, SolverDiagnostics, VelocitySolver};
pub use error::{RegError, Result};
pub use metrics::{dice, hausdorff_slice_avg, jacobian_stats, warp_labels, JacobianStats, LabelVolume};
pub use registration::{register_pair, Profile, RegistrationConfig, RegistrationResult};
pub use regularizer::{laplacian_symbol, multinomial_terms, regulariser_energy, MultinomialTerm};
pub use scalar::Real;
pub use volume::{
    compose_deformation, image_gradient, jacobian_determinant, trilinear_sample, warp_image,
    DeformationField, Dims, ScalarVolume, Spacing, VectorField,
};

/// Single-precision storage, the default for volumes read from disk.
pub type Volume32 = ScalarVolume<f32>;
pub type Volume64 = ScalarVolume<f64>;
pub type Field32 = VectorField<f32>;
pub type Field64 = VectorField<f64>;
pub type Deformation32 = DeformationField<f32>;
pub type Deformation64 = DeformationField<f64>;
pub type Kernel32 = regularizer::SpectralKernel<f32>;
pub type Kernel64 = regularizer::SpectralKernel<f64>;
pub type Registration32 = RegistrationResult<f32>;
pub type Registration64 = RegistrationResult<f64>;
