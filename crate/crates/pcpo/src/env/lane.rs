//! Single-vehicle lane keeping on a closed track.
//!
//! The vehicle follows a 2-DOF dynamic bicycle model (lateral velocity and
//! yaw rate) at constant longitudinal speed, integrated with explicit RK4.
//! The policy observes `(d, beta)`: signed lateral deviation from the
//! centerline and heading error against the path tangent. The reward is a
//! function of the state in which the action is taken,
//! `r = -(100/9) d^2 - beta^2`; leaving the lane (|d| > half width) ends the
//! episode with a risk of 100.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::track::TrackGeometry;
use super::{DoneReason, Environment, StepOutcome};

/// Front wheel angle bound, rad.
pub const STEER_LIMIT: f64 = std::f64::consts::FRAC_PI_4;
/// Off-lane boundary: half the 3 m lane width.
pub const OFFLANE_BOUND: f64 = 1.5;
/// Risk emitted on an off-lane termination.
pub const OFFLANE_RISK: f64 = 100.0;
/// Episode step limit.
pub const LANE_MAX_STEPS: u32 = 500;

/// Typical passenger-car parameters, stable at the fixed 50 km/h speed.
#[derive(Debug, Clone, Copy)]
pub struct BicycleParams {
    /// Vehicle mass, kg.
    pub mass: f64,
    /// Yaw moment of inertia, kg m^2.
    pub inertia_z: f64,
    /// Distance from the center of gravity to the front axle, m.
    pub dist_front: f64,
    /// Distance from the center of gravity to the rear axle, m.
    pub dist_rear: f64,
    /// Front cornering stiffness, N/rad.
    pub stiffness_front: f64,
    /// Rear cornering stiffness, N/rad.
    pub stiffness_rear: f64,
    /// Constant longitudinal speed, m/s.
    pub speed: f64,
    /// Integration step, s.
    pub dt: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            inertia_z: 2500.0,
            dist_front: 1.2,
            dist_rear: 1.6,
            stiffness_front: 80_000.0,
            stiffness_rear: 80_000.0,
            speed: 50.0 / 3.6,
            dt: 0.05,
        }
    }
}

/// Full simulation state. Only `(d, beta)` is observable by the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneState {
    /// Signed lateral deviation from the centerline, m.
    pub d: f64,
    /// Heading error against the path tangent, rad.
    pub beta: f64,
    /// Lateral velocity in the body frame, m/s.
    pub v_y: f64,
    /// Yaw rate, rad/s.
    pub yaw_rate: f64,
    /// Arc-length position along the track, m.
    pub s: f64,
}

pub struct LaneEnv {
    track: TrackGeometry,
    params: BicycleParams,
    state: LaneState,
    steps: u32,
}

pub(crate) fn lane_reward(d: f64, beta: f64) -> f64 {
    -(100.0 / 9.0) * d * d - beta * beta
}

impl LaneEnv {
    pub fn new(track: TrackGeometry, params: BicycleParams) -> Self {
        Self {
            track,
            params,
            state: LaneState {
                d: 0.0,
                beta: 0.0,
                v_y: 0.0,
                yaw_rate: 0.0,
                s: 0.0,
            },
            steps: 0,
        }
    }

    pub fn state(&self) -> &LaneState {
        &self.state
    }

    pub fn track(&self) -> &TrackGeometry {
        &self.track
    }

    pub fn params(&self) -> &BicycleParams {
        &self.params
    }

    /// Overrides the simulation state (testing and evaluation setups).
    pub fn set_state(&mut self, state: LaneState) {
        self.state = state;
        self.steps = 0;
    }

    /// Time derivative of `(v_y, yaw_rate, beta, d, s)`.
    fn derivatives(&self, st: &LaneState, delta_f: f64) -> [f64; 5] {
        let p = &self.params;
        let vx = p.speed;
        let (cf, cr) = (p.stiffness_front, p.stiffness_rear);
        let (a, b) = (p.dist_front, p.dist_rear);
        let kappa = self.track.curvature_at(st.s);

        let dv_y = -((cf + cr) / (p.mass * vx)) * st.v_y
            + ((b * cr - a * cf) / (p.mass * vx) - vx) * st.yaw_rate
            + (cf / p.mass) * delta_f;
        let dyaw = ((b * cr - a * cf) / (p.inertia_z * vx)) * st.v_y
            - ((a * a * cf + b * b * cr) / (p.inertia_z * vx)) * st.yaw_rate
            + (a * cf / p.inertia_z) * delta_f;
        let dbeta = st.yaw_rate - vx * kappa;
        let dd = vx * st.beta.sin() + st.v_y * st.beta.cos();
        let ds = vx * st.beta.cos() - st.v_y * st.beta.sin();
        [dv_y, dyaw, dbeta, dd, ds]
    }

    fn rk4(&self, delta_f: f64) -> LaneState {
        let dt = self.params.dt;
        let y0 = self.state;
        let add = |st: &LaneState, k: &[f64; 5], h: f64| LaneState {
            v_y: st.v_y + h * k[0],
            yaw_rate: st.yaw_rate + h * k[1],
            beta: st.beta + h * k[2],
            d: st.d + h * k[3],
            s: st.s + h * k[4],
        };
        let k1 = self.derivatives(&y0, delta_f);
        let k2 = self.derivatives(&add(&y0, &k1, dt / 2.0), delta_f);
        let k3 = self.derivatives(&add(&y0, &k2, dt / 2.0), delta_f);
        let k4 = self.derivatives(&add(&y0, &k3, dt), delta_f);
        let mut next = y0;
        next.v_y += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
        next.yaw_rate += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
        next.beta += dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]);
        next.d += dt / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]);
        next.s += dt / 6.0 * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4]);
        next.s = next.s.rem_euclid(self.track.total_length());
        next
    }
}

impl Environment for LaneEnv {
    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-STEER_LIMIT]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![STEER_LIMIT]
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.state.d, self.state.beta]
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = rng.random_range(0.0..self.track.total_length());
        let d = rng.random_range(-0.5..0.5);
        let beta = rng.random_range(-0.1..0.1);
        self.state = LaneState {
            d,
            beta,
            v_y: 0.0,
            yaw_rate: 0.0,
            s,
        };
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 1 {
            return Err(Error::DimensionMismatch {
                context: "lane action",
                expected: 1,
                actual: action.len(),
            });
        }
        let delta_f = action[0].clamp(-STEER_LIMIT, STEER_LIMIT);
        let reward = lane_reward(self.state.d, self.state.beta);
        let next = self.rk4(delta_f);
        if !(next.v_y.is_finite()
            && next.yaw_rate.is_finite()
            && next.beta.is_finite()
            && next.d.is_finite()
            && next.s.is_finite())
        {
            return Err(Error::Internal(
                "lane dynamics produced a non-finite state".into(),
            ));
        }
        self.state = next;
        self.steps += 1;

        let (risk, done, reason) = if next.d.abs() > OFFLANE_BOUND {
            (OFFLANE_RISK, true, DoneReason::OffLane)
        } else if self.steps >= LANE_MAX_STEPS {
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

    fn deviation(&self) -> Option<f64> {
        Some(self.state.d.abs())
    }
}
