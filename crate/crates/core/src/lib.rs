//! Self-guided self-play on a verifiable modular-path domain.
//!
//! A Solver policy attempts problems, a Conjecturer proposes simpler related
//! problems for the ones still unsolved, and a rubric Guide scores those
//! proposals. The crate also carries the rollout fabric used to distribute
//! generation and verification, and the sigmoid scaling-law fitter used to
//! extrapolate cumulative solve-rate curves.

pub mod domain;
pub mod fabric;
pub mod guide;
pub mod hashing;
pub mod objectives;
pub mod orchestrator;
pub mod policy;
pub mod scaling;
