//! Unicycle kinematics with a first-order actuation lag.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

pub const MAX_DT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("time step {0} outside (0, {MAX_DT}]")]
    InvalidDt(f64),
}

/// Pose plus actuated velocities of one robot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x1: f64,
    pub x2: f64,
    /// Heading, wrapped to (-π, π].
    pub x3: f64,
    pub u_act: f64,
    pub w_act: f64,
}

impl AgentState {
    pub fn at_pose(x1: f64, x2: f64, x3: f64) -> Self {
        Self { x1, x2, x3, u_act: 0.0, w_act: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.x2, self.x3, self.u_act, self.w_act].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub u: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(u: f64, omega: f64) -> Self {
        Self { u, omega }
    }
}

/// Platform abstraction: lag time constants and velocity limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationModel {
    pub tau_u: f64,
    pub tau_w: f64,
    pub u_max: f64,
    pub w_max: f64,
}

impl ActuationModel {
    pub const fn ideal() -> Self {
        Self { tau_u: 0.0, tau_w: 0.0, u_max: f64::INFINITY, w_max: f64::INFINITY }
    }

    pub const fn turtlebot3() -> Self {
        Self { tau_u: 0.02, tau_w: 0.02, u_max: 0.26, w_max: 2.84 }
    }

    pub const fn laikago() -> Self {
        Self { tau_u: 0.15, tau_w: 0.15, u_max: 1.0, w_max: 2.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau_u >= 0.0 && self.tau_w >= 0.0) || self.tau_u.is_infinite() || self.tau_w.is_infinite() {
            return Err(format!("lag time constants must be finite and >= 0 (tau_u={}, tau_w={})", self.tau_u, self.tau_w));
        }
        if !(self.u_max > 0.0 && self.w_max > 0.0) {
            return Err(format!("velocity limits must be > 0 (u_max={}, w_max={})", self.u_max, self.w_max));
        }
        Ok(())
    }
}

impl Default for ActuationModel {
    fn default() -> Self {
        Self::ideal()
    }
}

/// Wraps an angle into (-π, π]; the result differs from the input by a multiple of 2π.
pub fn wrap_angle(theta: f64) -> Result<f64, DynamicsError> {
    if !theta.is_finite() {
        return Err(DynamicsError::NonFiniteInput);
    }
    Ok(wrap(theta))
}

pub(crate) fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let k = ((theta - PI) / TAU).ceil();
    let w = theta - k * TAU;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

fn relax(current: f64, target: f64, tau: f64, dt: f64) -> f64 {
    if tau == 0.0 {
        target
    } else {
        target + (current - target) * (-dt / tau).exp()
    }
}

fn unicycle(x3: f64, u: f64, w: f64) -> [f64; 3] {
    [u * x3.cos(), u * x3.sin(), w]
}

/// Advances one agent by `dt`: actuation relaxes toward the saturated command, then
/// the pose is integrated with RK4 holding the actuated velocities constant.
pub fn step(state: &AgentState, cmd: ControlInput, model: &ActuationModel, dt: f64) -> Result<AgentState, DynamicsError> {
    if !state.is_finite() || !cmd.u.is_finite() || !cmd.omega.is_finite() {
        return Err(DynamicsError::NonFiniteInput);
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(DynamicsError::InvalidDt(dt));
    }
    let u_cmd = cmd.u.clamp(-model.u_max, model.u_max);
    let w_cmd = cmd.omega.clamp(-model.w_max, model.w_max);
    let u = relax(state.u_act, u_cmd, model.tau_u, dt).clamp(-model.u_max, model.u_max);
    let w = relax(state.w_act, w_cmd, model.tau_w, dt).clamp(-model.w_max, model.w_max);

    let p = [state.x1, state.x2, state.x3];
    let k1 = unicycle(p[2], u, w);
    let k2 = unicycle(p[2] + 0.5 * dt * k1[2], u, w);
    let k3 = unicycle(p[2] + 0.5 * dt * k2[2], u, w);
    let k4 = unicycle(p[2] + dt * k3[2], u, w);
    let mut next = [0.0; 3];
    for i in 0..3 {
        next[i] = p[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(AgentState { x1: next[0], x2: next[1], x3: wrap(next[2]), u_act: u, w_act: w })
}
