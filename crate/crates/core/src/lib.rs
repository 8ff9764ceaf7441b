//! Estimation of divergence-free velocity and diffusivity fields from
//! concentration time series by fitting an advection-diffusion model.

pub mod error;
pub mod estimator;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod series;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
pub use grid::{BoundaryClass, DiffScheme, DomainMask, Grid3, ScalarField, VectorField};
pub use series::VolumeSeries;
