//! Skid-steer kino-dynamic model and trajectory rollout.
//!
//! The discrete model is
//! `x' = x + [mu * v * cos(theta), mu * v * sin(theta), nu * omega] * dt`,
//! where `mu` and `nu` scale how much of the commanded linear and angular
//! velocity the terrain actually lets through. The constant-parameter form
//! backs the estimator, the map-parameterized form backs the controller.

use serde::{Deserialize, Serialize};

use crate::grid::TraversabilityMap;
use crate::util::wrap_angle;

/// Planar robot pose. Heading is kept in `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State2D {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl State2D {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self { px, py, theta: wrap_angle(theta) }
    }

    /// Express a world point in this pose's local frame.
    pub fn world_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.px;
        let dy = y - self.py;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Express a local point in the world frame.
    pub fn local_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.px + c * x - s * y, self.py + s * x + c * y)
    }
}

/// Commanded linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub v: f64,
    pub omega: f64,
}

impl Control {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self { v: 0.0, omega: 0.0 }
    }

    pub fn clamped(&self, limits: &ActuatorLimits) -> Self {
        Self {
            v: self.v.clamp(-limits.v_max, limits.v_max),
            omega: self.omega.clamp(-limits.omega_max, limits.omega_max),
        }
    }
}

/// Actuator saturation. Defaults are config values, not platform claims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self { v_max: 1.0, omega_max: 1.5 }
    }
}

/// A rolled-out state sequence at fixed step `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State2D>,
    pub dt: f64,
}

impl Trajectory {
    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| ((w[1].px - w[0].px).powi(2) + (w[1].py - w[0].py).powi(2)).sqrt())
            .sum()
    }
}

/// One Euler step of the traction-scaled unicycle model.
pub fn step(x: &State2D, u: &Control, mu: f64, nu: f64, dt: f64) -> State2D {
    debug_assert!(dt > 0.0);
    State2D::new(
        x.px + mu * u.v * x.theta.cos() * dt,
        x.py + mu * u.v * x.theta.sin() * dt,
        x.theta + nu * u.omega * dt,
    )
}

/// Roll out with constant traction coefficients.
pub fn rollout_const(x0: &State2D, controls: &[Control], mu: f64, nu: f64, dt: f64) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut x = *x0;
    for u in controls {
        x = step(&x, u, mu, nu, dt);
        states.push(x);
    }
    Trajectory { states, dt }
}

/// Roll out with position-dependent traction looked up from the map.
///
/// Coefficients are sampled by bilinear interpolation at the *current* state
/// of each step; queries outside the map clamp to the border value.
pub fn rollout_map(x0: &State2D, controls: &[Control], map: &TraversabilityMap, dt: f64) -> Trajectory {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut x = *x0;
    for u in controls {
        let (mu, nu) = map.sample(x.px, x.py);
        x = step(&x, u, mu, nu, dt);
        states.push(x);
    }
    Trajectory { states, dt }
}
