//! Three vehicles crossing an unsignalized intersection on fixed tracks.
//!
//! Vehicle 1 travels west to east along `y = -1.75`, vehicle 2 south to north
//! along `x = +1.75`, vehicle 3 north to south along `x = -1.75`. Each track
//! is an 80 m straight with `l = 0` at its middle point (the projection of
//! the intersection center), so a vehicle's planar position is derived from
//! its scalar progress `l`. The centralized policy observes
//! `(l1, v1, l2, v2, l3, v3)` and commands the three accelerations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{DoneReason, Environment, StepOutcome};

pub const ACCEL_LIMIT: f64 = 3.0;
pub const SPEED_MIN: f64 = 6.0;
pub const SPEED_MAX: f64 = 14.0;
pub const COLLISION_RISK: f64 = 50.0;
/// A vehicle has passed the conflict zone once `l >= PASS_THRESHOLD`.
pub const PASS_THRESHOLD: f64 = 10.0;
/// Vehicles collide when their centers come closer than this (discs of
/// radius 1.25 m).
pub const COLLISION_DIST: f64 = 2.5;
pub const INTERSECTION_MAX_STEPS: u32 = 200;
const DT: f64 = 0.1;
const LANE_OFFSET: f64 = 1.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionState {
    /// Signed distance to the middle point of each track, m.
    pub l: [f64; 3],
    /// Speeds, m/s, kept in `[SPEED_MIN, SPEED_MAX]`.
    pub v: [f64; 3],
    /// Monotone per-vehicle passed flags.
    pub passed: [bool; 3],
}

pub struct IntersectionEnv {
    state: IntersectionState,
    steps: u32,
}

impl Default for IntersectionEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl IntersectionEnv {
    pub fn new() -> Self {
        Self {
            state: IntersectionState {
                l: [-30.0; 3],
                v: [SPEED_MIN; 3],
                passed: [false; 3],
            },
            steps: 0,
        }
    }

    pub fn state(&self) -> &IntersectionState {
        &self.state
    }

    pub fn set_state(&mut self, state: IntersectionState) {
        self.state = state;
        self.steps = 0;
    }

    /// Planar position of vehicle `i` derived from its track progress.
    pub fn position(&self, i: usize) -> (f64, f64) {
        let l = self.state.l[i];
        match i {
            0 => (l, -LANE_OFFSET),
            1 => (LANE_OFFSET, l),
            2 => (-LANE_OFFSET, -l),
            _ => unreachable!("three vehicles"),
        }
    }

    fn min_pairwise_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..3 {
            for j in i + 1..3 {
                let (xi, yi) = self.position(i);
                let (xj, yj) = self.position(j);
                let d = ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
                min = min.min(d);
            }
        }
        min
    }
}

impl Environment for IntersectionEnv {
    fn obs_dim(&self) -> usize {
        6
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-ACCEL_LIMIT; 3]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![ACCEL_LIMIT; 3]
    }

    fn observe(&self) -> Vec<f64> {
        let st = &self.state;
        vec![st.l[0], st.v[0], st.l[1], st.v[1], st.l[2], st.v[2]]
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut l = [0.0; 3];
        let mut v = [0.0; 3];
        for i in 0..3 {
            l[i] = rng.random_range(-40.0..-15.0);
            v[i] = rng.random_range(SPEED_MIN..SPEED_MAX);
        }
        self.state = IntersectionState {
            l,
            v,
            passed: [false; 3],
        };
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 3 {
            return Err(Error::DimensionMismatch {
                context: "intersection action",
                expected: 3,
                actual: action.len(),
            });
        }
        let mut crossed = 0;
        let all_before = self.state.passed.iter().all(|&p| p);
        for i in 0..3 {
            let a = action[i].clamp(-ACCEL_LIMIT, ACCEL_LIMIT);
            let v = self.state.v[i];
            self.state.l[i] += v * DT + 0.5 * a * DT * DT;
            self.state.v[i] = (v + a * DT).clamp(SPEED_MIN, SPEED_MAX);
            if !self.state.passed[i] && self.state.l[i] >= PASS_THRESHOLD {
                self.state.passed[i] = true;
                crossed += 1;
            }
        }
        self.steps += 1;
        let all_after = self.state.passed.iter().all(|&p| p);
        let success_now = all_after && !all_before;
        let reward = -1.0 + 10.0 * crossed as f64 + if success_now { 10.0 } else { 0.0 };

        let (risk, done, reason) = if self.min_pairwise_distance() < COLLISION_DIST {
            (COLLISION_RISK, true, DoneReason::Collision)
        } else if all_after {
            (0.0, true, DoneReason::Success)
        } else if self.steps >= INTERSECTION_MAX_STEPS {
            (0.0, true, DoneReason::Timeout)
        } else {
            (0.0, false, DoneReason::Running)
        };
        Ok(StepOutcome {
            obs: self.observe(),
            reward,
            risk,
            done,
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state(l: [f64; 3], v: [f64; 3]) -> IntersectionState {
        IntersectionState {
            l,
            v,
            passed: [false; 3],
        }
    }

    #[test]
    fn plain_step_costs_one() {
        let mut e = IntersectionEnv::new();
        e.set_state(state([-30.0, -25.0, -35.0], [8.0, 10.0, 7.0]));
        let out = e.step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.reward, -1.0);
        assert_eq!(out.risk, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn kinematics_update_order() {
        let mut e = IntersectionEnv::new();
        e.set_state(state([-30.0, -30.0, -30.0], [10.0, 10.0, 10.0]));
        e.step(&[2.0, 0.0, -2.0]).unwrap();
        let st = e.state();
        // Position update uses the old speed, then the speed is clipped.
        assert!((st.l[0] - (-30.0 + 10.0 * 0.1 + 0.5 * 2.0 * 0.01)).abs() < 1e-12);
        assert!((st.v[0] - 10.2).abs() < 1e-12);
        assert!((st.l[2] - (-30.0 + 10.0 * 0.1 - 0.5 * 2.0 * 0.01)).abs() < 1e-12);
        assert!((st.v[2] - 9.8).abs() < 1e-12);
    }

    #[test]
    fn speeds_stay_in_bounds_and_progress_is_monotone() {
        let mut e = IntersectionEnv::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        e.reset(&mut rng);
        let mut prev = e.state().l;
        for k in 0..150 {
            let a = [
                3.5 * ((k as f64) * 0.3).sin(),
                -4.0,
                3.0 * ((k as f64) * 0.7).cos(),
            ];
            let out = e.step(&a).unwrap();
            let st = e.state();
            for i in 0..3 {
                assert!(st.v[i] >= SPEED_MIN && st.v[i] <= SPEED_MAX);
                assert!(st.l[i] > prev[i], "l must strictly increase");
            }
            prev = st.l;
            if out.done {
                break;
            }
        }
    }

    #[test]
    fn single_vehicle_pass_rewards_ten() {
        let mut e = IntersectionEnv::new();
        // Vehicle 1 about to cross the pass threshold; others far behind.
        e.set_state(state([9.5, -30.0, -30.0], [10.0, 8.0, 8.0]));
        let out = e.step(&[0.0, 0.0, 0.0]).unwrap();
        assert!(e.state().passed[0]);
        assert_eq!(out.reward, -1.0 + 10.0);
        assert!(!out.done);
    }

    #[test]
    fn final_pass_adds_terminal_bonus() {
        let mut e = IntersectionEnv::new();
        let mut st = state([20.0, 15.0, 9.8], [10.0, 10.0, 10.0]);
        st.passed = [true, true, false];
        e.set_state(st);
        let out = e.step(&[0.0, 0.0, 0.0]).unwrap();
        // Last vehicle crossed: -1 + 10 (pass) + 10 (terminal success) = 19.
        assert_eq!(out.reward, 19.0);
        assert!(out.done);
        assert_eq!(out.reason, DoneReason::Success);
        assert_eq!(out.risk, 0.0);
    }

    #[test]
    fn conflict_point_collision_emits_risk() {
        let mut e = IntersectionEnv::new();
        // Vehicles 1 and 2 arrive at the conflict area simultaneously:
        // positions (l1, -1.75) and (1.75, l2) meet near the center.
        e.set_state(state([1.0, -2.0, -30.0], [10.0, 10.0, 8.0]));
        let out = e.step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.risk, COLLISION_RISK);
        assert!(out.done);
        assert_eq!(out.reason, DoneReason::Collision);
    }

    #[test]
    fn reset_is_deterministic_preconflict_and_collision_free() {
        let mut e = IntersectionEnv::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(55);
        let mut r2 = ChaCha8Rng::seed_from_u64(55);
        let o1 = e.reset(&mut r1);
        let o2 = e.reset(&mut r2);
        assert_eq!(o1, o2);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10_000 {
            e.reset(&mut rng);
            let st = e.state();
            for i in 0..3 {
                assert!(st.l[i] >= -40.0 && st.l[i] < -15.0);
                assert!(st.v[i] >= SPEED_MIN && st.v[i] < SPEED_MAX);
            }
            assert!(e.min_pairwise_distance() > COLLISION_DIST);
        }
    }
}
