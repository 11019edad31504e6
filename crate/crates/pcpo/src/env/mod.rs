//! Deterministic, seedable simulation environments.
//!
//! Each environment instance is single-threaded and owned by exactly one
//! rollout worker; instances are independent and may run concurrently.

mod intersection;
mod lane;
mod track;

pub use intersection::{IntersectionEnv, IntersectionState};
pub use lane::{BicycleParams, LaneEnv, LaneState};
pub use track::{generate_track, TrackGeometry, TrackSample, SAMPLE_SPACING};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    Running,
    OffLane,
    Collision,
    Success,
    Timeout,
}

/// One environment transition. `risk` is zero except on terminal
/// off-lane/collision steps; `reason` is `Running` iff `done` is false.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub risk: f64,
    pub done: bool,
    pub reason: DoneReason,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_low(&self) -> Vec<f64>;
    fn action_high(&self) -> Vec<f64>;

    /// Current observation vector.
    fn observe(&self) -> Vec<f64>;

    /// Re-initializes the episode state; returns the first observation.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Advances one step under `action` (clipped internally to the action
    /// box). The returned observation is the post-step state.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Absolute lateral deviation from the lane center, where meaningful.
    fn deviation(&self) -> Option<f64> {
        None
    }
}
