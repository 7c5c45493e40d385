//! Proximal policy gradient arborescence: a differentiable quality-diversity
//! search that branches policies off a single search point using
//! objective/measure gradients estimated with on-policy RL.
//!
//! The crate is organised bottom-up:
//!
//! * [`archive`], soft-threshold grid archive and QD metrics.
//! * [`xnes`], exponential natural evolution strategy over gradient coefficients.
//! * [`envs`], vectorized evaluation domains (toy locomotion MDP and an analytic benchmark).
//! * [`nn`], MLP actor/critic with hand-written backward passes.
//! * [`vppo`], vectorized PPO: objective/measure Jacobian estimation and walking.
//! * [`ppga`], the outer QD loop.

pub mod archive;
pub mod checkpoint;
pub mod envs;
pub mod io;
pub mod nn;
pub mod ppga;
pub mod seeding;
pub mod vppo;
pub mod xnes;
