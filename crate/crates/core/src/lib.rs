//! Matched-sampling estimation of risk-adjusted premium rate change between
//! policy years.
//!
//! The pipeline runs ingest → propensity → distance/matcher (or genmatch) →
//! balance → estimator → bootstrap. Every stage is deterministic given its
//! inputs and seed.

pub mod error;
pub mod model;
pub mod seed;
pub mod ingest;
pub mod design;
pub mod propensity;
pub mod distance;
pub mod matcher;
pub mod balance;
pub mod genmatch;
pub mod estimator;
pub mod bootstrap;

pub use error::{Error, Result};
pub use model::*;
