//! Nonparametric constancy tests for function-valued parameters.
//!
//! Given i.i.d. observations, this crate tests whether a conditional summary
//! (conditional mean, conditional average treatment effect, or conditional
//! covariance) is constant in a conditioning variable. The test statistic is
//! the supremum over a prescribed function class of a debiased, influence-
//! score-based contrast; its null distribution is calibrated by a multiplier
//! bootstrap; several classes are combined by an exchangeable aggregate test
//! or a Cauchy combination.
//!
//! Module map:
//! - [`data`]: dataset representation, CSV ingestion, role validation;
//! - [`smooth`]: penalized natural cubic splines and propensity models;
//! - [`scores`]: per-observation influence components per estimand;
//! - [`funclass`]: indicator and basis function classes and their statistics;
//! - [`boot`]: multiplier-bootstrap calibration of one class;
//! - [`combine`]: aggregate test across classes, Cauchy combination;
//! - [`sim`]: data-generating processes and Monte Carlo harness;
//! - [`cli`]: command-line entry points (`test`, `simulate`).

pub mod boot;
pub mod cli;
pub mod combine;
pub mod data;
pub mod funclass;
pub mod scores;
pub mod sim;
pub mod smooth;

// Matrix types appear in the public API (workspaces, factorizations).
pub use nalgebra;

/// Union of all module error types, for pipeline-level plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("nuisance: {0}")]
    Nuisance(#[from] smooth::NuisanceError),
    #[error("scores: {0}")]
    Score(#[from] scores::ScoreError),
    #[error("function class: {0}")]
    Class(#[from] funclass::ClassError),
    #[error("combine: {0}")]
    Combine(#[from] combine::CombineError),
    #[error("simulation: {0}")]
    Sim(#[from] sim::SimError),
}

impl Error {
    /// Process exit code: 2 for data/configuration problems, 3 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) => 2,
            Error::Score(scores::ScoreError::Data(_)) => 2,
            Error::Score(scores::ScoreError::EstimandMismatch { .. }) => 2,
            Error::Score(scores::ScoreError::BadConditioningIndex { .. }) => 2,
            Error::Sim(_) => 2,
            _ => 3,
        }
    }
}
