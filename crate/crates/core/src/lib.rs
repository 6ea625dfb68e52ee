//! Risk profiling of glucose forecaster victims under constrained evasion
//! attacks, and selective training of anomaly detectors on the less
//! vulnerable cohort.
//!
//! The pipeline runs in five steps: simulate the attack against each
//! victim's forecaster ([`attack`]), score every prediction by a
//! severity-weighted squared deviation ([`risk`]), collect the scores into
//! per-victim risk profiles, cluster the profiles into less and more
//! vulnerable cohorts ([`cluster`]), and train detectors on a chosen cohort
//! ([`detect`]) before scoring them on a shared test pool ([`evaluate`]).

pub mod attack;
pub mod cluster;
pub mod data;
pub mod detect;
pub mod error;
pub mod evaluate;
pub mod pipeline;
pub mod predictor;
pub mod risk;

pub use error::{Error, Result};
