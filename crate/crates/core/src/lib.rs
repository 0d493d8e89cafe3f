//! Ensemble data assimilation engine.
//!
//! A local ensemble transform Kalman filter with Gaussian R-localization,
//! relaxation-to-prior covariance inflation, homogeneity-maximizing
//! observation thinning and latitude-weighted verification, driven through
//! observing system simulation experiments with toy forecast models.

pub mod cycle;
pub mod ensemble;
pub mod geo;
pub mod letkf;
pub mod metrics;
pub mod models;
pub mod obs;
pub mod rng;
pub mod space;
pub mod thinning;

pub use ensemble::{EnsembleError, EnsembleState};
pub use geo::{GeoPoint, GridSpec};
pub use obs::{ObsBatch, Observation, Variable};
pub use space::{GridSpace, RingSpace, StateSpace};
