//! Pseudo-spectral solver for the doubly periodic 2D incompressible
//! Navier-Stokes equations, with AOT nudging data assimilation and
//! recovery of an unknown viscosity from coarse velocity observations.
//!
//! Every numerical type is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command line tools.

pub mod assimilation;
pub mod error;
pub mod field;
pub mod grid;
pub mod io;
pub mod forcing;
pub mod nonlinear;
pub mod observation;
pub mod pipeline;
pub mod recovery;
pub mod scalar;
pub mod sensitivity;
pub mod solver;
pub mod spectrum;

pub use error::{Error, Result};
pub use field::{random_field, Cutoff, Norms, SpectralField};
pub use grid::Grid2D;
pub use nonlinear::{nonlinear_term, Workspace};
pub use scalar::Real;

pub type Grid = Grid2D<f64>;
pub type Field = SpectralField<f64>;
