//! True benchmark dynamics, the learned surrogate, and datasets.

pub mod dataset;
pub mod learned;
pub mod system;

pub use dataset::{generate_dataset, Dataset, DatasetRole, Sample, SamplingMode};
pub use learned::ControlAffineModel;
pub use system::{InjectedError, SystemKind, SystemSpec};

/// A continuous-time vector field `ẋ = F(x, u)`.
pub trait Dynamics: Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
}
