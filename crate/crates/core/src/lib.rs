//! Shadowing-based data assimilation.
//!
//! Observations are refined into an exact model orbit by Newton iterations on
//! the stacked one-step residuals `u[n+1] - F(u[n])`. The projected variant
//! restricts Newton updates to a time-dependent non-stable tangent subspace
//! (tracked with thin QR frames) and fixes the stable complement by a forward
//! synchronization pass. Lorenz 63 and Lorenz 96 models, a strong-constraint
//! 4DVar baseline, and parameter estimation are included.

pub mod assimilate;
pub mod error;
pub mod fourdvar;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod obs;
pub mod params;
pub mod tangent;

pub use error::{Error, Result};
pub use models::{DynamicalMap, Field, Model, Scheme, Trajectory};

pub use nalgebra::{DMatrix, DVector};
