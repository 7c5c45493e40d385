//! Small MLPs with hand-written backward passes, the Gaussian actor, value
//! critics, running normalizers and Adam.
//!
//! Parameters and activations are `f32`; returns and log-densities are
//! accumulated in `f64`.

mod adam;
mod mlp;
mod normalizer;
mod policy;

pub use adam::Adam;
pub use mlp::{Dense, Mlp};
pub use normalizer::{NormalizerSnapshot, RewardNormalizer, RunningNormalizer};
pub use policy::{ActOutput, ActorPolicy, PolicyHeader, StdMode, ValueCritic};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("backward called before a cached forward pass")]
    NoForwardCache,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("input has {got} features, network expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("bad policy checkpoint: {0}")]
    Checkpoint(String),
}
