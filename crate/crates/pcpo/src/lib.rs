//! Safe reinforcement learning with constrained trust-region policy updates.
//!
//! The crate provides:
//!
//! - [`nn`]: minimal MLP function approximators with exact analytic first
//!   derivatives, diagonal-Gaussian policy math and Fisher-vector products;
//! - [`env`]: deterministic, seedable driving environments (lane keeping on a
//!   closed track with a dynamic bicycle model, and a three-vehicle
//!   unsignalized intersection);
//! - [`rollout`]: synchronized parallel sample collection with n-step reward
//!   and risk targets;
//! - [`solver`]: the linearized constrained trust-region subproblem, its dual,
//!   the policy update and the recovery step;
//! - [`train`]: the end-to-end training loop (parallel constrained updates,
//!   the single-learner variant and a clipped-surrogate baseline) with
//!   per-epoch metrics and checkpointing.

pub mod env;
pub mod error;
pub mod nn;
pub mod rollout;
pub mod solver;
pub mod train;

mod linalg;

pub use error::{Error, Result};
