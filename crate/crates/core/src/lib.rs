//! Leader-follower formation control for unicycle robots.
//!
//! A steered leader defines a path; every follower tracks a reference that travels
//! along the same path a fixed arc length behind. References advance with the
//! leader's displacement, so spacing along the curve is kept whatever the speed.
//!
//! * [`path`]: spline paths, arc length, replanning and frame rotation.
//! * [`dynamics`]: unicycle kinematics with actuation lag and saturation.
//! * [`control`]: tracking errors and the feedback law.
//! * [`reference`]: per-agent reference propagation.
//! * [`stability`]: quadratic Lyapunov function and sampled certification.
//! * [`sim`]: the fixed-step engine and steering events.
//! * [`telemetry`]: traces, metrics, CSV and JSON-lines exports.
//! * [`gateway`]: WebSocket streaming and live steering.

pub mod control;
pub mod dynamics;
pub mod gateway;
pub mod path;
pub mod reference;
pub mod sim;
pub mod stability;
pub mod telemetry;

pub use control::{ErrorVector, Gains};
pub use dynamics::{ActuationModel, AgentState, ControlInput};
pub use path::{FrameTransform, PathModel, Point, ReplanParams, SplineKind};
pub use reference::{FormationConfig, ReferenceState};
pub use sim::{Engine, Scenario, SimError, SimSnapshot, SteerAction, SteerEvent};
pub use stability::{LyapunovWeights, StabilityRegion};
pub use telemetry::SimTrace;
