//! Fixed-step simulation of a leader-follower formation under live or scripted steering.
//!
//! Agent poses are kept in the global frame. The path, the references and the
//! control computation live in the path's local frame, which is rotated whenever the
//! leader's heading gets steep.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam::channel::{Receiver, RecvTimeoutError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{compute_error, control_law, ControlError, ErrorVector, Gains};
use crate::dynamics::{step as integrate, wrap, ActuationModel, AgentState, ControlInput, DynamicsError, MAX_DT};
use crate::path::{
    FrameTransform, PathError, PathModel, Point, ReplanParams, SplineKind, Waypoint, DEFAULT_ROTATION_TARGET,
};
use crate::reference::{initialize_formation, propagate, reference_at, spacing_profile, FormationConfig, ReferenceState};
use crate::stability::{is_positive_definite, quadratic_form, LyapunovWeights};

pub const MAX_HEADING_DELTA: f64 = PI / 4.0;
/// Steps an agent may hold its previous command through a control singularity.
pub const SINGULARITY_LIMIT: u32 = 3;
pub const SETTLE_HOLD_STEPS: u64 = 50;
pub const DEFAULT_SETTLE_FRACTION: f64 = 0.05;
/// Heading change per steering keystroke.
pub const KEYSTROKE_HEADING: f64 = 5.0 * PI / 180.0;
/// Speed change per speed keystroke (m/s).
pub const KEYSTROKE_SPEED: f64 = 0.05;
pub const LIVE_EMIT_EVERY: u64 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("leader ran off the end of the path at step {k} (x = {x})")]
    PathExhausted { k: u64, x: f64 },
    #[error("control singularity for agent {agent} on {SINGULARITY_LIMIT} consecutive steps ending at step {k}")]
    SingularityAbort { agent: usize, k: u64 },
    #[error("path error at step {k}: {source}")]
    Path { k: u64, source: PathError },
    #[error("dynamics error at step {k}: {source}")]
    Dynamics { k: u64, source: DynamicsError },
}

impl SimError {
    pub fn is_scenario_error(&self) -> bool {
        matches!(self, SimError::Scenario(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SteerAction {
    /// Radians added to the leader's current reference heading.
    HeadingDelta(f64),
    /// Absolute commanded speed (m/s).
    SetSpeed(f64),
    SetGains(Gains),
    Pause,
    Resume,
    Reset,
}

impl SteerAction {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            SteerAction::HeadingDelta(d) if !(d.is_finite() && d.abs() <= MAX_HEADING_DELTA) => {
                Err(format!("heading delta {d} rad exceeds ±{MAX_HEADING_DELTA:.4} rad"))
            }
            SteerAction::SetSpeed(v) if !(v.is_finite() && v >= 0.0) => Err(format!("speed must be finite and >= 0, got {v}")),
            SteerAction::SetGains(g) => g.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerEvent {
    pub t: f64,
    #[serde(flatten)]
    pub action: SteerAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventOrigin {
    Script,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppliedEvent {
    pub k: u64,
    pub t: f64,
    pub origin: EventOrigin,
    pub action: SteerAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedEvent {
    pub k: u64,
    pub origin: EventOrigin,
    pub action: SteerAction,
    pub reason: String,
}

/// Global pose, `x3` in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Key into [`Scenario::gains`].
    pub platform: String,
    pub actuation: ActuationModel,
    /// Defaults to the agent's initial reference pose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub kind: SplineKind,
    /// Local-to-global transform the waypoints are expressed in.
    #[serde(default)]
    pub frame: FrameTransform,
    /// Leader's initial abscissa; defaults to the formation's length ahead of the domain start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_x: Option<f64>,
}

fn default_emit_every() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub formation: FormationConfig,
    pub agents: Vec<AgentSpec>,
    pub gains: BTreeMap<String, Gains>,
    #[serde(default)]
    pub weights: LyapunovWeights,
    pub initial_path: PathSpec,
    pub dt: f64,
    pub duration: f64,
    #[serde(default = "default_emit_every")]
    pub emit_every: u64,
    #[serde(default)]
    pub steering_script: Vec<SteerEvent>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replan: ReplanParams,
}

fn degrees(d: f64) -> f64 {
    d * PI / 180.0
}

impl Scenario {
    pub const PRESETS: [&'static str; 3] = ["turtlebot3", "laikago", "mixed"];

    /// Packaged scenarios: a single +15° turn for each platform, and a
    /// heterogeneous four-agent run on a curved path with three turns.
    pub fn preset(name: &str) -> Option<Scenario> {
        let straight: Vec<Point> = (0..=12).map(|i| Point::new(i as f64, 0.0)).collect();
        let replan = ReplanParams { lookahead: 5.0, n_new_waypoints: 20, ..ReplanParams::default() };
        let turn = vec![SteerEvent { t: 0.1, action: SteerAction::HeadingDelta(degrees(15.0)) }];
        let single = |platform: &str, actuation: ActuationModel, gains: Gains, v_cmd: f64, duration: f64| Scenario {
            formation: FormationConfig { n_agents: 3, spacing_d: 0.5, v_cmd },
            agents: (0..3)
                .map(|_| AgentSpec { platform: platform.into(), actuation, initial_pose: None })
                .collect(),
            gains: BTreeMap::from([(platform.to_string(), gains)]),
            weights: LyapunovWeights::default(),
            initial_path: PathSpec {
                waypoints: straight.clone(),
                kind: SplineKind::ClampedCubicBSpline,
                frame: FrameTransform::IDENTITY,
                leader_x: Some(1.5),
            },
            dt: 0.001,
            duration,
            emit_every: 1,
            steering_script: turn.clone(),
            seed: 0,
            replan,
        };
        match name {
            "turtlebot3" => Some(single("turtlebot3", ActuationModel::turtlebot3(), Gains::TURTLEBOT3, 0.2, 12.0)),
            "laikago" => Some(single("laikago", ActuationModel::laikago(), Gains::LAIKAGO, 0.3, 12.0)),
            "mixed" => {
                let curve = (0..=20).map(|i| i as f64).map(|x| Point::new(x, 0.8 * (0.35 * x).sin())).collect();
                let agents = (0..4)
                    .map(|i| {
                        let (platform, actuation) = if i % 2 == 0 {
                            ("turtlebot3", ActuationModel::turtlebot3())
                        } else {
                            ("laikago", ActuationModel::laikago())
                        };
                        AgentSpec { platform: platform.into(), actuation, initial_pose: None }
                    })
                    .collect();
                Some(Scenario {
                    formation: FormationConfig { n_agents: 4, spacing_d: 1.0, v_cmd: 0.2 },
                    agents,
                    gains: BTreeMap::from([("laikago".into(), Gains::MIXED), ("turtlebot3".into(), Gains::MIXED)]),
                    weights: LyapunovWeights::default(),
                    initial_path: PathSpec {
                        waypoints: curve,
                        kind: SplineKind::ClampedCubicBSpline,
                        frame: FrameTransform::IDENTITY,
                        leader_x: Some(4.0),
                    },
                    dt: 0.001,
                    duration: 10.0,
                    emit_every: 1,
                    steering_script: vec![
                        SteerEvent { t: 2.0, action: SteerAction::HeadingDelta(degrees(15.0)) },
                        SteerEvent { t: 4.5, action: SteerAction::HeadingDelta(degrees(-20.0)) },
                        SteerEvent { t: 7.0, action: SteerAction::HeadingDelta(degrees(10.0)) },
                    ],
                    seed: 0,
                    replan: ReplanParams { lookahead: 5.0, n_new_waypoints: 20, ..ReplanParams::default() },
                })
            }
            _ => None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        steps_for(self.duration, self.dt)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.check().map_err(SimError::Scenario)
    }

    fn check(&self) -> Result<(), String> {
        self.formation.validate()?;
        if self.agents.len() != self.formation.n_agents {
            return Err(format!("{} agents listed for n_agents = {}", self.agents.len(), self.formation.n_agents));
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.actuation.validate().map_err(|e| format!("agent {i}: {e}"))?;
            if !self.gains.contains_key(&a.platform) {
                return Err(format!("agent {i}: no gains for platform '{}'", a.platform));
            }
            if let Some(p) = a.initial_pose {
                if !(p.x1.is_finite() && p.x2.is_finite() && p.x3.is_finite()) {
                    return Err(format!("agent {i}: non-finite initial pose"));
                }
            }
        }
        for (name, g) in &self.gains {
            g.validate().map_err(|e| format!("platform '{name}': {e}"))?;
        }
        let pd = is_positive_definite(&self.weights);
        if let Some(m) = pd.failed_minor {
            return Err(format!(
                "Lyapunov weights are not positive definite: leading principal minor {m} = {}",
                pd.minors[m - 1]
            ));
        }
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(format!("dt must be in (0, {MAX_DT}], got {}", self.dt));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(format!("duration must be > 0, got {}", self.duration));
        }
        if self.emit_every == 0 {
            return Err("emit_every must be >= 1".into());
        }
        let r = &self.replan;
        if !(r.lookahead > 0.0 && r.lookahead.is_finite()) || r.n_new_waypoints < 3 {
            return Err("replan needs lookahead > 0 and n_new_waypoints >= 3".into());
        }
        if !(r.steep_threshold > DEFAULT_ROTATION_TARGET && r.steep_threshold < PI / 2.0) {
            return Err(format!("steep_threshold must lie in (15°, 90°), got {} rad", r.steep_threshold));
        }
        for (i, ev) in self.steering_script.iter().enumerate() {
            if !(ev.t >= 0.0 && ev.t.is_finite()) {
                return Err(format!("steering event {i}: t must be >= 0"));
            }
            ev.action.validate().map_err(|e| format!("steering event {i}: {e}"))?;
        }
        Ok(())
    }
}

fn steps_for(t: f64, dt: f64) -> u64 {
    (t / dt - 1e-9).ceil().max(0.0) as u64
}

/// One agent's slice of a snapshot. Poses and references are in the snapshot's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub state: AgentState,
    pub reference: ReferenceState,
    pub error: ErrorVector,
    pub control: ControlInput,
    pub error_norm: f64,
    pub lyapunov: f64,
}

impl AgentSnapshot {
    pub fn global_pose(&self, frame: &FrameTransform) -> Pose {
        let p = frame.to_global(Point::new(self.state.x1, self.state.x2));
        Pose { x1: p.x, x2: p.y, x3: wrap(frame.heading_to_global(self.state.x3)) }
    }
}

/// Everything the engine used at step `k`: the state before integration, the
/// reference it was compared with, and the command that was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub k: u64,
    pub t: f64,
    pub v_cmd: f64,
    pub agents: Vec<AgentSnapshot>,
    /// Path waypoints, local frame.
    pub path: Vec<Point>,
    pub frame: FrameTransform,
    /// Arc-length gaps between consecutive references.
    pub gaps: Vec<f64>,
}

pub trait SnapshotSink {
    fn accept(&mut self, snapshot: &SimSnapshot);
}

impl SnapshotSink for Vec<SimSnapshot> {
    fn accept(&mut self, snapshot: &SimSnapshot) {
        self.push(snapshot.clone());
    }
}

/// Discards snapshots.
pub struct NullSink;

impl SnapshotSink for NullSink {
    fn accept(&mut self, _: &SimSnapshot) {}
}

impl<F: FnMut(&SimSnapshot)> SnapshotSink for F {
    fn accept(&mut self, snapshot: &SimSnapshot) {
        self(snapshot)
    }
}

/// Live steering input. Events are stamped with the step at which they are polled.
pub trait EventSource {
    /// Events that arrived since the last poll; `None` once the source has shut down.
    fn poll(&mut self, k: u64) -> Option<Vec<SteerAction>>;
    /// Blocks until an event arrives; `None` once the source has shut down.
    fn wait(&mut self) -> Option<SteerAction>;
}

/// Event source fed by a channel; shuts down when `stop` is raised.
pub struct ChannelSource {
    rx: Receiver<SteerAction>,
    stop: Arc<AtomicBool>,
}

impl ChannelSource {
    pub fn new(rx: Receiver<SteerAction>, stop: Arc<AtomicBool>) -> Self {
        Self { rx, stop }
    }
}

impl EventSource for ChannelSource {
    fn poll(&mut self, _k: u64) -> Option<Vec<SteerAction>> {
        if self.stop.load(Ordering::Relaxed) {
            return None;
        }
        let mut out = Vec::new();
        while let Ok(a) = self.rx.try_recv() {
            out.push(a);
        }
        Some(out)
    }

    fn wait(&mut self) -> Option<SteerAction> {
        loop {
            if self.stop.load(Ordering::Relaxed) {
                return None;
            }
            match self.rx.recv_timeout(Duration::from_millis(20)) {
                Ok(a) => return Some(a),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return None,
            }
        }
    }
}

/// Delivers pre-timed actions as if they had arrived live at the given steps.
pub struct TimedSource {
    queue: VecDeque<(u64, SteerAction)>,
}

impl TimedSource {
    pub fn new(mut events: Vec<(u64, SteerAction)>) -> Self {
        events.sort_by_key(|e| e.0);
        Self { queue: events.into() }
    }
}

impl EventSource for TimedSource {
    fn poll(&mut self, k: u64) -> Option<Vec<SteerAction>> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|e| e.0 <= k) {
            out.push(self.queue.pop_front().unwrap().1);
        }
        Some(out)
    }

    fn wait(&mut self) -> Option<SteerAction> {
        self.queue.pop_front().map(|e| e.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Settle {
    Steps(u64),
    NeverSettled,
}

impl Settle {
    pub fn steps(&self) -> Option<u64> {
        match self {
            Settle::Steps(n) => Some(*n),
            Settle::NeverSettled => None,
        }
    }
}

/// Settling of one error-norm series after an event.
///
/// `series` holds `(k, ‖e‖)` pairs with increasing `k`, already restricted to the
/// post-event window. The result counts steps from `event_step` to the first sample
/// after the peak that is below `frac × peak` and stays below for [`SETTLE_HOLD_STEPS`] steps.
pub fn settle_series(series: &[(u64, f64)], event_step: u64, frac: f64) -> Settle {
    let (peak_at, peak) = series.iter().enumerate().fold((0, 0.0), |best, (i, s)| if s.1 > best.1 { (i, s.1) } else { best });
    if peak == 0.0 {
        return Settle::Steps(0);
    }
    let threshold = frac * peak;
    let mut start: Option<u64> = None;
    for &(k, v) in &series[peak_at..] {
        if v < threshold {
            let s = *start.get_or_insert(k);
            if k - s + 1 >= SETTLE_HOLD_STEPS {
                return Settle::Steps(s - event_step);
            }
        } else {
            start = None;
        }
    }
    Settle::NeverSettled
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSettle {
    pub k: u64,
    pub action: SteerAction,
    pub per_agent: Vec<Settle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub digest: String,
    pub steps: u64,
    pub ended_early: bool,
    pub peak_error: Vec<f64>,
    pub settle: Vec<EventSettle>,
    pub final_spacing: Vec<f64>,
    /// Largest `|gap - d|` over emitted snapshots.
    pub max_spacing_deviation: f64,
    pub events: Vec<AppliedEvent>,
    pub dropped: Vec<DroppedEvent>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub start_paused: bool,
    /// Sleep so that one step takes `dt` of wall time.
    pub real_time: bool,
    /// Overrides the scenario's `emit_every`.
    pub emit_every: Option<u64>,
}

#[derive(Debug, Clone)]
struct Physical {
    path: PathModel,
    refs: Vec<ReferenceState>,
    states: Vec<AgentState>,
    v_cmd: f64,
    gains: BTreeMap<String, Gains>,
}

pub struct Engine {
    scenario: Scenario,
    digest: String,
    initial: Physical,
    now: Physical,
    last_cmd: Vec<ControlInput>,
    singular: Vec<u32>,
    k: u64,
    /// References were just (re)initialised and must not be propagated this step.
    fresh: bool,
    paused: bool,
    emit_every: u64,
    events: Vec<AppliedEvent>,
    dropped: Vec<DroppedEvent>,
    norms: Vec<Vec<(u64, f64)>>,
    max_spacing_deviation: f64,
}

fn local_state(frame: &FrameTransform, s: &AgentState) -> AgentState {
    let p = frame.to_local(Point::new(s.x1, s.x2));
    AgentState { x1: p.x, x2: p.y, x3: wrap(frame.heading_to_local(s.x3)), ..*s }
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let bad = |e: PathError| SimError::Scenario(format!("initial path: {e}"));
        let spec = &scenario.initial_path;
        let path = PathModel::build_in_frame(spec.waypoints.clone(), spec.kind, spec.frame).map_err(bad)?;
        let config = scenario.formation;
        let leader_x = match spec.leader_x {
            Some(x) => x,
            None => path.point_at_arc_length(path.domain().0, -config.length()).map_err(bad)?,
        };
        let refs = initialize_formation(&path, leader_x, &config).map_err(bad)?;
        let frame = path.frame();
        let states = scenario
            .agents
            .iter()
            .zip(&refs)
            .map(|(a, r)| {
                let (x1, x2, x3) = match a.initial_pose {
                    Some(p) => (p.x1, p.x2, p.x3),
                    None => {
                        let g = frame.to_global(Point::new(r.x1s, r.x2s));
                        (g.x, g.y, frame.heading_to_global(r.x3s))
                    }
                };
                AgentState { x1, x2, x3: wrap(x3), u_act: r.u_ref, w_act: r.w_ref }
            })
            .collect();
        let initial = Physical { path, refs, states, v_cmd: config.v_cmd, gains: scenario.gains.clone() };
        let n = config.n_agents;
        Ok(Self {
            digest: scenario.digest(),
            emit_every: scenario.emit_every,
            now: initial.clone(),
            initial,
            scenario,
            last_cmd: vec![ControlInput::default(); n],
            singular: vec![0; n],
            k: 0,
            fresh: true,
            paused: false,
            events: Vec::new(),
            dropped: Vec::new(),
            norms: vec![Vec::new(); n],
            max_spacing_deviation: 0.0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn path(&self) -> &PathModel {
        &self.now.path
    }

    pub fn references(&self) -> &[ReferenceState] {
        &self.now.refs
    }

    /// Agent states in the global frame.
    pub fn states(&self) -> &[AgentState] {
        &self.now.states
    }

    pub fn v_cmd(&self) -> f64 {
        self.now.v_cmd
    }

    pub fn events(&self) -> &[AppliedEvent] {
        &self.events
    }

    pub fn dropped(&self) -> &[DroppedEvent] {
        &self.dropped
    }

    fn config(&self) -> FormationConfig {
        FormationConfig { v_cmd: self.now.v_cmd, ..self.scenario.formation }
    }

    fn gains_for(&self, agent: usize) -> Gains {
        self.now.gains[&self.scenario.agents[agent].platform]
    }

    /// Applies a steering action between steps. Returns whether it was applied; a
    /// rejected action is recorded in [`Engine::dropped`] and leaves the engine untouched.
    pub fn apply(&mut self, action: SteerAction, origin: EventOrigin) -> bool {
        let result = action.validate().and_then(|_| self.apply_unchecked(action));
        match result {
            Ok(()) => {
                let t = self.k as f64 * self.scenario.dt;
                self.events.push(AppliedEvent { k: self.k, t, origin, action });
                true
            }
            Err(reason) => {
                self.dropped.push(DroppedEvent { k: self.k, origin, action, reason });
                false
            }
        }
    }

    fn apply_unchecked(&mut self, action: SteerAction) -> Result<(), String> {
        match action {
            SteerAction::HeadingDelta(delta) => {
                let next = self.replanned(delta).map_err(|e| e.to_string())?;
                self.now = next;
            }
            SteerAction::SetSpeed(v) => {
                self.now.v_cmd = v;
                let path = &self.now.path;
                self.now.refs =
                    self.now.refs.iter().map(|r| reference_at(path, r.x1s, v)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
            }
            SteerAction::SetGains(g) => {
                for v in self.now.gains.values_mut() {
                    *v = g;
                }
            }
            SteerAction::Pause => self.paused = true,
            SteerAction::Resume => self.paused = false,
            SteerAction::Reset => {
                self.now = self.initial.clone();
                self.fresh = true;
                self.last_cmd.iter_mut().for_each(|c| *c = ControlInput::default());
                self.singular.iter_mut().for_each(|c| *c = 0);
            }
        }
        Ok(())
    }

    fn replan_params(&self) -> ReplanParams {
        let mut p = self.scenario.replan;
        p.retain_length = p.retain_length.max(self.scenario.formation.length() + 2.0 * self.scenario.formation.spacing_d);
        p
    }

    /// Path and references after turning the leader by `delta`, rotating the frame
    /// first when the new heading would be too steep.
    fn replanned(&self, delta: f64) -> Result<Physical, PathError> {
        let params = self.replan_params();
        let leader = self.now.refs[0];
        let heading = leader.x3s + delta;
        let mut next = self.now.clone();
        match next.path.replan(leader.x1s, heading, &params) {
            Ok(p) => next.path = p,
            Err(PathError::SteepHeading { .. }) => {
                let rotation = heading - DEFAULT_ROTATION_TARGET.copysign(heading);
                next = self.rotated_by(rotation)?;
                let x = next.refs[0].x1s;
                next.path = next.path.replan(x, DEFAULT_ROTATION_TARGET.copysign(heading), &params)?;
            }
            Err(e) => return Err(e),
        }
        let (path, v) = (&next.path, next.v_cmd);
        next.refs = next.refs.iter().map(|r| reference_at(path, r.x1s, v)).collect::<Result<_, _>>()?;
        Ok(next)
    }

    /// Re-expresses path and references in a frame rotated by `delta` about the leader's reference point.
    fn rotated_by(&self, delta: f64) -> Result<Physical, PathError> {
        let pivot = self.now.refs[0].x1s;
        let old = self.now.path.frame();
        // geometry behind the last follower is only dropped when it would fold back
        let (path, frame) = match self.now.path.rotated(pivot, delta) {
            Err(PathError::DegenerateGeometry(_)) => {
                let tail = self.now.refs.iter().map(|r| r.x1s).fold(f64::INFINITY, f64::min);
                self.now.path.trimmed(tail)?.rotated(pivot, delta)?
            }
            other => other?,
        };
        let refs = self
            .now
            .refs
            .iter()
            .map(|r| {
                let p = frame.to_local(old.to_global(Point::new(r.x1s, r.x2s)));
                reference_at(&path, p.x, self.now.v_cmd)
            })
            .collect::<Result<_, _>>()?;
        Ok(Physical { path, refs, ..self.now.clone() })
    }

    fn errors_and_controls(&self) -> Vec<(AgentState, ErrorVector, Result<ControlInput, ControlError>)> {
        let frame = self.now.path.frame();
        self.now
            .states
            .iter()
            .zip(&self.now.refs)
            .enumerate()
            .map(|(i, (s, r))| {
                let local = local_state(&frame, s);
                let e = compute_error(&local, r).unwrap_or(ErrorVector { e1: f64::NAN, e2: f64::NAN, e3: f64::NAN });
                let u = control_law(&e, r, &self.gains_for(i));
                (local, e, u)
            })
            .collect()
    }

    fn build_snapshot(&self, rows: &[(AgentState, ErrorVector, ControlInput)]) -> SimSnapshot {
        let agents = rows
            .iter()
            .zip(&self.now.refs)
            .map(|((s, e, u), r)| AgentSnapshot {
                state: *s,
                reference: *r,
                error: *e,
                control: *u,
                error_norm: e.norm(),
                lyapunov: quadratic_form(e, &self.scenario.weights),
            })
            .collect();
        SimSnapshot {
            k: self.k,
            t: self.k as f64 * self.scenario.dt,
            v_cmd: self.now.v_cmd,
            agents,
            path: self.now.path.waypoints().to_vec(),
            frame: self.now.path.frame(),
            gaps: spacing_profile(&self.now.refs, &self.now.path).unwrap_or_default(),
        }
    }

    /// Snapshot of the current step as it would be emitted, without advancing.
    pub fn snapshot(&self) -> SimSnapshot {
        let rows: Vec<_> = self
            .errors_and_controls()
            .into_iter()
            .enumerate()
            .map(|(i, (s, e, u))| (s, e, u.unwrap_or(self.last_cmd[i])))
            .collect();
        self.build_snapshot(&rows)
    }

    fn check_frame(&mut self) -> Result<(), PathError> {
        let heading = self.now.refs[0].x3s;
        if heading.abs() > self.scenario.replan.steep_threshold {
            self.now = self.rotated_by(heading - DEFAULT_ROTATION_TARGET.copysign(heading))?;
        }
        Ok(())
    }

    /// Advances one step: frame check, reference propagation, control, emission, integration.
    pub fn step(&mut self, sink: &mut dyn SnapshotSink) -> Result<(), SimError> {
        let k = self.k;
        self.check_frame().map_err(|source| SimError::Path { k, source })?;
        if !self.fresh {
            let config = self.config();
            self.now.refs = propagate(&self.now.refs, &self.now.path, &config, self.scenario.dt).map_err(|e| match e {
                PathError::OutOfDomain { .. } => {
                    SimError::PathExhausted { k, x: self.now.refs[0].x1s + config.v_cmd * self.now.refs[0].x3s.cos() * self.scenario.dt }
                }
                source => SimError::Path { k, source },
            })?;
        }
        self.fresh = false;

        let mut rows = Vec::with_capacity(self.now.states.len());
        for (i, (s, e, u)) in self.errors_and_controls().into_iter().enumerate() {
            let u = match u {
                Ok(u) => {
                    self.singular[i] = 0;
                    self.last_cmd[i] = u;
                    u
                }
                Err(ControlError::HeadingSingularity(_)) => {
                    self.singular[i] += 1;
                    if self.singular[i] >= SINGULARITY_LIMIT {
                        return Err(SimError::SingularityAbort { agent: i, k });
                    }
                    self.last_cmd[i]
                }
                Err(_) => {
                    return Err(SimError::Dynamics { k, source: DynamicsError::NonFiniteInput });
                }
            };
            self.norms[i].push((k, e.norm()));
            rows.push((s, e, u));
        }

        if k.is_multiple_of(self.emit_every) {
            let snap = self.build_snapshot(&rows);
            let d = self.scenario.formation.spacing_d;
            for g in &snap.gaps {
                self.max_spacing_deviation = self.max_spacing_deviation.max((g - d).abs());
            }
            sink.accept(&snap);
        }

        for (i, (_, _, u)) in rows.iter().enumerate() {
            let model = self.scenario.agents[i].actuation;
            self.now.states[i] = integrate(&self.now.states[i], *u, &model, self.scenario.dt)
                .map_err(|source| SimError::Dynamics { k, source })?;
        }
        self.k += 1;
        Ok(())
    }

    /// Runs until the scenario's duration has elapsed. Scripted events are applied
    /// before live ones at each step. While paused, time stands still and the engine
    /// blocks on the live source; without one, a pause ends the run.
    pub fn run(
        &mut self,
        sink: &mut dyn SnapshotSink,
        mut live: Option<&mut dyn EventSource>,
        options: &RunOptions,
    ) -> Result<RunSummary, SimError> {
        if let Some(n) = options.emit_every {
            if n == 0 {
                return Err(SimError::Scenario("emit_every must be >= 1".into()));
            }
            self.emit_every = n;
        }
        let dt = self.scenario.dt;
        let mut script: Vec<(u64, SteerAction)> =
            self.scenario.steering_script.iter().map(|e| (steps_for(e.t, dt), e.action)).collect();
        script.sort_by_key(|e| e.0);
        let mut script: VecDeque<_> = script.into_iter().filter(|e| e.0 >= self.k).collect();
        if options.start_paused {
            self.paused = true;
        }
        let total = self.scenario.total_steps();
        let mut ended_early = false;
        let mut deadline = Instant::now();

        'outer: while self.k < total {
            while script.front().is_some_and(|e| e.0 <= self.k) {
                let (_, a) = script.pop_front().unwrap();
                self.apply(a, EventOrigin::Script);
            }
            if let Some(src) = live.as_deref_mut() {
                match src.poll(self.k) {
                    Some(actions) => {
                        for a in actions {
                            self.apply(a, EventOrigin::Live);
                        }
                    }
                    None => {
                        ended_early = true;
                        break;
                    }
                }
            }
            while self.paused {
                match live.as_deref_mut().and_then(|src| src.wait()) {
                    Some(a) => {
                        self.apply(a, EventOrigin::Live);
                        deadline = Instant::now();
                    }
                    None => {
                        ended_early = true;
                        break 'outer;
                    }
                }
            }
            self.step(sink)?;
            if options.real_time {
                deadline += Duration::from_secs_f64(dt);
                let now = Instant::now();
                if deadline > now {
                    std::thread::sleep(deadline - now);
                } else {
                    deadline = now;
                }
            }
        }
        Ok(self.summary(ended_early))
    }

    pub fn summary(&self, ended_early: bool) -> RunSummary {
        let settle = self
            .events
            .iter()
            .enumerate()
            .map(|(j, ev)| {
                let end = self.events.get(j + 1).map_or(u64::MAX, |n| n.k);
                let per_agent = self
                    .norms
                    .iter()
                    .map(|series| {
                        let window: Vec<_> = series.iter().copied().filter(|s| s.0 >= ev.k && s.0 < end).collect();
                        settle_series(&window, ev.k, DEFAULT_SETTLE_FRACTION)
                    })
                    .collect();
                EventSettle { k: ev.k, action: ev.action, per_agent }
            })
            .collect();
        RunSummary {
            digest: self.digest.clone(),
            steps: self.k,
            ended_early,
            peak_error: self.norms.iter().map(|s| s.iter().map(|v| v.1).fold(0.0, f64::max)).collect(),
            settle,
            final_spacing: spacing_profile(&self.now.refs, &self.now.path).unwrap_or_default(),
            max_spacing_deviation: self.max_spacing_deviation,
            events: self.events.clone(),
            dropped: self.dropped.clone(),
        }
    }
}

/// Headless run with lossless snapshot delivery.
pub fn run(
    scenario: Scenario,
    sink: &mut dyn SnapshotSink,
    live: Option<&mut dyn EventSource>,
) -> Result<RunSummary, SimError> {
    Engine::new(scenario)?.run(sink, live, &RunOptions::default())
}
