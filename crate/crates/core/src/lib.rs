//! Particle simulation of self-attention flows on the unit sphere, with
//! explicit piecewise-constant parameter schedules that cluster, separate and
//! transport ensembles of empirical measures.

pub mod dynamics;
pub mod error;
pub mod io;
pub mod measures;
pub mod pipeline;
pub mod sphere;
pub mod synthesis;
pub mod tolerances;

pub use error::{Error, ErrorKind, Result};
pub use measures::EmpiricalMeasure;
pub use sphere::{SphericalCap, UnitVector};
