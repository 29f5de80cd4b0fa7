//! Dense linear algebra and ODE primitives.

pub mod linalg;
pub mod mat;
pub mod ode;
pub mod real;

pub use linalg::{min_positive_singular_value, singular_values, spectral_bounds, sym_eigen, SymEigen, SymMatrix};
pub use mat::Mat;
pub use ode::{rk4_integrate, rk4_step, OdeSolution};
pub use real::Real;
