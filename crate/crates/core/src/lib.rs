//! Sparse-query 4D occupancy world model on synthetic driving scenes.

pub mod config;
pub mod forecast;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perception;
pub mod scalar;
pub mod scheduling;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default precision used by training, evaluation and the CLI.
pub type Real = f64;
pub type Tensor = nn::tensor::Tensor<Real>;
pub type Pose = geometry::Pose<Real>;
pub type GridSpec = geometry::GridSpec<Real>;
pub type Rap = perception::Rap<Real>;
pub type Scf = forecast::Scf<Real>;
pub type Model = model::WorldModel<Real>;
