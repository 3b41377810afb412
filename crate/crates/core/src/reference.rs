//! Per-agent reference states driven by the leader's progress along the path.
//!
//! Every agent's reference advances along the same curve at the commanded speed, so
//! arc-length spacing set at initialisation is preserved as the formation moves.

use serde::{Deserialize, Serialize};

use crate::path::{PathError, PathModel};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceState {
    pub x1s: f64,
    pub x2s: f64,
    pub x3s: f64,
    pub u_ref: f64,
    pub w_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig {
    pub n_agents: usize,
    pub spacing_d: f64,
    pub v_cmd: f64,
}

impl FormationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_agents == 0 {
            return Err("n_agents must be >= 1".into());
        }
        if !(self.spacing_d > 0.0 && self.spacing_d.is_finite()) {
            return Err(format!("spacing_d must be > 0, got {}", self.spacing_d));
        }
        if !self.v_cmd.is_finite() {
            return Err("v_cmd must be finite".into());
        }
        Ok(())
    }

    /// Arc length between the leader and the last follower.
    pub fn length(&self) -> f64 {
        (self.n_agents.saturating_sub(1)) as f64 * self.spacing_d
    }
}

/// Reference pose at abscissa `x` with feedforward `u* = v_cmd`, `ω* = v_cmd·κ(x)`.
pub fn reference_at(path: &PathModel, x: f64, v_cmd: f64) -> Result<ReferenceState, PathError> {
    let s = path.eval(x)?;
    Ok(ReferenceState { x1s: x, x2s: s.y, x3s: s.heading(), u_ref: v_cmd, w_ref: v_cmd * s.curvature() })
}

/// Places agent `i` (0 = leader) at arc length `i·d` behind `leader_x`.
pub fn initialize_formation(
    path: &PathModel,
    leader_x: f64,
    config: &FormationConfig,
) -> Result<Vec<ReferenceState>, PathError> {
    config.validate().map_err(PathError::InvalidParameter)?;
    (0..config.n_agents)
        .map(|i| {
            let x = path.point_at_arc_length(leader_x, i as f64 * config.spacing_d)?;
            reference_at(path, x, config.v_cmd)
        })
        .collect()
}

/// One discrete propagation step for every agent's reference.
pub fn propagate(
    refs: &[ReferenceState],
    path: &PathModel,
    config: &FormationConfig,
    dt: f64,
) -> Result<Vec<ReferenceState>, PathError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PathError::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    refs.iter()
        .map(|r| {
            let x = r.x1s + config.v_cmd * r.x3s.cos() * dt;
            reference_at(path, x, config.v_cmd)
        })
        .collect()
}

/// Consecutive arc-length gaps between references (`n - 1` values).
pub fn spacing_profile(refs: &[ReferenceState], path: &PathModel) -> Result<Vec<f64>, PathError> {
    refs.windows(2).map(|w| path.arc_length(w[1].x1s, w[0].x1s)).collect()
}
