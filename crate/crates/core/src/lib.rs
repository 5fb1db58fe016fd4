//! Diffeomorphic image registration on periodic grids (LDDMM, geodesic
//! shooting, metamorphosis) together with the matching geometry diagnostics
//! for small neural networks (Fisher-Rao metric, influence functions,
//! data reweighting, curve-length complexity, dynamic isometry).
//!
//! The grid-based modules are generic over the scalar type through [`Real`];
//! `f32` and `f64` both work. The network module works in `f64` throughout.

pub mod error;
pub mod fields;
pub mod io;
pub mod kernel;
pub mod lddmm;
pub mod metamorphosis;
pub mod netgeo;
pub mod optim;
pub mod shooting;
pub mod transport;

mod real;

pub use error::{GeoError, Result};
pub use real::Real;

pub use fields::{DeformationMap, Grid, ScalarField, TimePath, VectorField};
pub use kernel::SobolevKernel;
pub use lddmm::{RegistrationProblem, RegistrationResult};
pub use metamorphosis::MorphProblem;


pub type Grid64 = fields::Grid<f64>;
pub type ScalarField64 = fields::ScalarField<f64>;
pub type VectorField64 = fields::VectorField<f64>;
pub type DeformationMap64 = fields::DeformationMap<f64>;
pub type SobolevKernel64 = kernel::SobolevKernel<f64>;
pub type RegistrationProblem64 = lddmm::RegistrationProblem<f64>;

pub type Grid32 = fields::Grid<f32>;
pub type ScalarField32 = fields::ScalarField<f32>;
pub type VectorField32 = fields::VectorField<f32>;
pub type DeformationMap32 = fields::DeformationMap<f32>;
pub type SobolevKernel32 = kernel::SobolevKernel<f32>;
pub type RegistrationProblem32 = lddmm::RegistrationProblem<f32>;
