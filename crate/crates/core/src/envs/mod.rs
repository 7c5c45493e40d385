//! Evaluation domains.
//!
//! [`PointHopper`] is a batched toy locomotion MDP whose per-leg contact
//! indicators double as Markovian measure proxies. [`AnalyticProblem`] is a
//! closed-form benchmark with exact objective and measure gradients.

mod analytic;
mod pointhopper;

pub use analytic::{AnalyticEval, AnalyticProblem};
pub use pointhopper::{EpisodeEnd, PointHopper, PointHopperConfig, StepResult};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("non-finite action in environment {env}")]
    NonFiniteAction { env: usize },
    #[error("expected {expected} action values, got {got}")]
    ActionShape { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
}
