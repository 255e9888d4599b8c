//! Discrete-time unicycle robot and constant-velocity obstacles.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vector2<f64>,
    /// Heading in radians, never wrapped.
    pub heading: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { position: Vector2::new(x, y), heading }
    }
}

/// Commanded linear speed (m/s) and angular rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn norm_squared(&self) -> f64 {
        self.v * self.v + self.omega * self.omega
    }
}

/// Additive actuation noise on the commanded (v, ω).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    pub v: f64,
    pub omega: f64,
}

impl Disturbance {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

impl ObstacleState {
    pub fn new(position: [f64; 2], velocity: [f64; 2]) -> Self {
        Self { position: Vector2::new(position[0], position[1]), velocity: Vector2::new(velocity[0], velocity[1]) }
    }
}

/// Velocity actually realized by the robot. The direction is evaluated at the
/// post-rotation heading `θ + (ω̄ + ε_ω)·Δt`.
#[inline]
pub fn realized_velocity(state: &RobotState, control: ControlInput, dist: Disturbance, dt: f64) -> Vector2<f64> {
    let speed = control.v + dist.v;
    let heading = state.heading + (control.omega + dist.omega) * dt;
    let (s, c) = heading.sin_cos();
    Vector2::new(speed * c, speed * s)
}

pub fn step_robot(state: &RobotState, control: ControlInput, dist: Disturbance, dt: f64) -> RobotState {
    let v = realized_velocity(state, control, dist, dt);
    RobotState { position: state.position + v * dt, heading: state.heading + (control.omega + dist.omega) * dt }
}

pub fn step_obstacle(state: &ObstacleState, dt: f64) -> ObstacleState {
    ObstacleState { position: state.position + state.velocity * dt, velocity: state.velocity }
}
