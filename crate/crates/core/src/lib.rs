//! Estimation and inference for linear IV regressions whose structural
//! coefficients change at unknown dates while the first stage is piecewise stable.

pub mod changepoint;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod montecarlo;
pub mod pipeline;
pub mod serde_mat;

pub use covariance::{HacConfig, MomentCovariance};
pub use data::{Dataset, ParamSet, Partition, Schema};
pub use error::{Error, Result};
pub use estimators::{EstimateResult, EstimatorKind, TheoreticalInputs};
