//! Python bindings: path queries, single-agent dynamics and control, Lyapunov checks,
//! and a steppable simulator driven by scenario JSON.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use conga_core::control::{self, ErrorVector, Gains};
use conga_core::dynamics::{self, ActuationModel, AgentState, ControlInput};
use conga_core::path::{PathModel, Point, ReplanParams, SplineKind};
use conga_core::reference::ReferenceState;
use conga_core::sim::{Engine, EventOrigin, NullSink, RunOptions, Scenario, SimError, SteerAction};
use conga_core::stability::{self, Certification, LyapunovWeights, StabilityRegion};
use conga_core::telemetry;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    if e.is_scenario_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn error_vec(e: (f64, f64, f64)) -> ErrorVector {
    ErrorVector::new(e.0, e.1, e.2)
}

fn reference(r: (f64, f64, f64, f64, f64)) -> ReferenceState {
    ReferenceState { x1s: r.0, x2s: r.1, x3s: r.2, u_ref: r.3, w_ref: r.4 }
}

fn gains(g: (f64, f64, f64)) -> Gains {
    Gains::new(g.0, g.1, g.2)
}

/// Spline path `y = g(x)` through waypoints with increasing `x`.
#[pyclass(name = "Path", module = "robot_conga", frozen)]
struct PyPath {
    inner: PathModel,
}

#[pymethods]
impl PyPath {
    /// `kind` is "bspline" (clamped cubic, the default) or "barycentric".
    #[new]
    #[pyo3(signature = (points, kind = "bspline"))]
    fn new(points: Vec<(f64, f64)>, kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "bspline" => SplineKind::ClampedCubicBSpline,
            "barycentric" => SplineKind::Barycentric,
            other => return Err(value_err(format!("unknown spline kind '{other}'"))),
        };
        let pts = points.into_iter().map(|(x, y)| Point::new(x, y)).collect();
        Ok(Self { inner: PathModel::build(pts, kind).map_err(value_err)? })
    }

    #[getter]
    fn domain(&self) -> (f64, f64) {
        self.inner.domain()
    }

    #[getter]
    fn waypoints(&self) -> Vec<(f64, f64)> {
        self.inner.waypoints().iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn knots(&self) -> Option<Vec<f64>> {
        self.inner.knots().map(<[f64]>::to_vec)
    }

    #[getter]
    fn coefficients(&self) -> Option<Vec<f64>> {
        self.inner.coefficients().map(<[f64]>::to_vec)
    }

    /// `(g, g', g'')` at `x`.
    fn eval(&self, x: f64) -> PyResult<(f64, f64, f64)> {
        let s = self.inner.eval(x).map_err(value_err)?;
        Ok((s.y, s.dy_dx, s.d2y_dx2))
    }

    fn curvature(&self, x: f64) -> PyResult<f64> {
        self.inner.curvature(x).map_err(value_err)
    }

    fn heading(&self, x: f64) -> PyResult<f64> {
        self.inner.heading(x).map_err(value_err)
    }

    fn arc_length(&self, a: f64, b: f64) -> PyResult<f64> {
        self.inner.arc_length(a, b).map_err(value_err)
    }

    /// Abscissa reached by walking arc length `s` backwards from `x` (negative `s` walks forwards).
    fn point_at_arc_length(&self, x: f64, s: f64) -> PyResult<f64> {
        self.inner.point_at_arc_length(x, s).map_err(value_err)
    }

    #[pyo3(signature = (anchor_x, heading, lookahead = 5.0, n_new_waypoints = 20))]
    fn replan(&self, anchor_x: f64, heading: f64, lookahead: f64, n_new_waypoints: usize) -> PyResult<Self> {
        let params = ReplanParams { lookahead, n_new_waypoints, ..ReplanParams::default() };
        Ok(Self { inner: self.inner.replan(anchor_x, heading, &params).map_err(value_err)? })
    }

    fn __repr__(&self) -> String {
        let (lo, hi) = self.inner.domain();
        format!("Path({} waypoints on [{lo}, {hi}])", self.inner.waypoints().len())
    }
}

/// One integration step; `state` is `(x1, x2, x3, u_act, w_act)`.
#[pyfunction]
#[pyo3(signature = (state, u, omega, dt, tau_u = 0.0, tau_w = 0.0, u_max = f64::INFINITY, w_max = f64::INFINITY))]
#[allow(clippy::too_many_arguments)]
fn step(
    state: (f64, f64, f64, f64, f64),
    u: f64,
    omega: f64,
    dt: f64,
    tau_u: f64,
    tau_w: f64,
    u_max: f64,
    w_max: f64,
) -> PyResult<(f64, f64, f64, f64, f64)> {
    let model = ActuationModel { tau_u, tau_w, u_max, w_max };
    model.validate().map_err(value_err)?;
    let s = AgentState { x1: state.0, x2: state.1, x3: state.2, u_act: state.3, w_act: state.4 };
    let n = dynamics::step(&s, ControlInput::new(u, omega), &model, dt).map_err(value_err)?;
    Ok((n.x1, n.x2, n.x3, n.u_act, n.w_act))
}

#[pyfunction]
fn wrap_angle(theta: f64) -> PyResult<f64> {
    dynamics::wrap_angle(theta).map_err(value_err)
}

/// Tracking error of pose `(x1, x2, x3)` against `reference = (x1s, x2s, x3s, u_ref, w_ref)`.
#[pyfunction]
fn compute_error(pose: (f64, f64, f64), reference_state: (f64, f64, f64, f64, f64)) -> PyResult<(f64, f64, f64)> {
    let s = AgentState::at_pose(pose.0, pose.1, pose.2);
    let e = control::compute_error(&s, &reference(reference_state)).map_err(value_err)?;
    Ok((e.e1, e.e2, e.e3))
}

/// Feedback `(u, omega)`; `gains = (lambda1, lambda2, lambda3)`.
#[pyfunction]
fn control_law(
    error: (f64, f64, f64),
    reference_state: (f64, f64, f64, f64, f64),
    gains_: (f64, f64, f64),
) -> PyResult<(f64, f64)> {
    let c = control::control_law(&error_vec(error), &reference(reference_state), &gains(gains_)).map_err(value_err)?;
    Ok((c.u, c.omega))
}

#[pyfunction]
fn closed_loop_rhs(
    error: (f64, f64, f64),
    reference_state: (f64, f64, f64, f64, f64),
    gains_: (f64, f64, f64),
) -> PyResult<(f64, f64, f64)> {
    let d = control::closed_loop_rhs(&error_vec(error), &reference(reference_state), &gains(gains_)).map_err(value_err)?;
    Ok((d.e1, d.e2, d.e3))
}

#[pyfunction]
fn lyapunov_value(error: (f64, f64, f64), delta: f64, delta1: f64) -> PyResult<f64> {
    stability::lyapunov_value(&error_vec(error), &LyapunovWeights::new(delta, delta1)).map_err(value_err)
}

#[pyfunction]
fn lyapunov_rate(
    error: (f64, f64, f64),
    reference_state: (f64, f64, f64, f64, f64),
    gains_: (f64, f64, f64),
    delta: f64,
    delta1: f64,
) -> PyResult<f64> {
    stability::lyapunov_rate(&error_vec(error), &reference(reference_state), &gains(gains_), &LyapunovWeights::new(delta, delta1))
        .map_err(value_err)
}

/// `(positive_definite, leading_minors, failed_minor)`; minors are numbered from 1.
#[pyfunction]
fn is_positive_definite(delta: f64, delta1: f64) -> (bool, [f64; 3], Option<usize>) {
    let c = stability::is_positive_definite(&LyapunovWeights::new(delta, delta1));
    (c.positive_definite, c.minors, c.failed_minor)
}

/// Samples `dV/dt` over the region; returns a dict with `outcome` "certified" or "counterexample".
#[pyfunction]
#[pyo3(signature = (gains_, e_max = (0.2, 0.2, 0.2), x3s_max = 0.5235987755982988, u_ref_range = (0.1, 0.5), delta = 100.0, delta1 = 10.0, n_samples = 100_000))]
#[allow(clippy::too_many_arguments)]
fn certify<'py>(
    py: Python<'py>,
    gains_: (f64, f64, f64),
    e_max: (f64, f64, f64),
    x3s_max: f64,
    u_ref_range: (f64, f64),
    delta: f64,
    delta1: f64,
    n_samples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let region = StabilityRegion {
        e1_max: e_max.0,
        e2_max: e_max.1,
        e3_max: e_max.2,
        x3s_max,
        u_ref_range: [u_ref_range.0, u_ref_range.1],
    };
    let w = LyapunovWeights::new(delta, delta1);
    let result = py.detach(|| stability::certify_region(&region, &gains(gains_), &w, n_samples)).map_err(value_err)?;
    let out = PyDict::new(py);
    match result {
        Certification::Certified { bounds, samples } => {
            out.set_item("outcome", "certified")?;
            out.set_item("alpha", bounds.alpha)?;
            out.set_item("beta", bounds.beta)?;
            out.set_item("rho", bounds.rho)?;
            out.set_item("samples", samples)?;
        }
        Certification::Counterexample { worst, violations, samples } => {
            out.set_item("outcome", "counterexample")?;
            out.set_item("error", (worst.e.e1, worst.e.e2, worst.e.e3))?;
            out.set_item("x3s", worst.x3s)?;
            out.set_item("u_ref", worst.u_ref)?;
            out.set_item("rate", worst.rate)?;
            out.set_item("violations", violations)?;
            out.set_item("samples", samples)?;
        }
    }
    Ok(out)
}

/// Scenario JSON for a packaged preset ("turtlebot3", "laikago" or "mixed").
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    let s = Scenario::preset(name).ok_or_else(|| value_err(format!("unknown preset '{name}'")))?;
    serde_json::to_string(&s).map_err(value_err)
}

fn parse_scenario(json: &str) -> PyResult<Scenario> {
    let s: Scenario = serde_json::from_str(json).map_err(value_err)?;
    s.validate().map_err(sim_err)?;
    Ok(s)
}

/// Runs a scenario headless; returns the summary as JSON and optionally writes the CSV trace.
#[pyfunction]
#[pyo3(signature = (scenario_json, csv_path = None))]
fn run_scenario(py: Python<'_>, scenario_json: &str, csv_path: Option<std::path::PathBuf>) -> PyResult<String> {
    let scenario = parse_scenario(scenario_json)?;
    let (trace, summary) = py.detach(|| telemetry::simulate(scenario)).map_err(sim_err)?;
    if let Some(p) = csv_path {
        telemetry::export_csv(&trace, p).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    serde_json::to_string(&summary).map_err(value_err)
}

/// Steppable engine. Steering calls take effect between steps.
#[pyclass(name = "Simulator", module = "robot_conga")]
struct PySimulator {
    engine: Engine,
}

impl PySimulator {
    fn act(&mut self, action: SteerAction) -> PyResult<()> {
        if self.engine.apply(action, EventOrigin::Live) {
            Ok(())
        } else {
            let reason = self.engine.dropped().last().map_or(String::new(), |d| d.reason.clone());
            Err(value_err(format!("{action:?} rejected: {reason}")))
        }
    }
}

#[pymethods]
impl PySimulator {
    #[new]
    fn new(scenario_json: &str) -> PyResult<Self> {
        Ok(Self { engine: Engine::new(parse_scenario(scenario_json)?).map_err(sim_err)? })
    }

    #[getter]
    fn k(&self) -> u64 {
        self.engine.k()
    }

    #[getter]
    fn digest(&self) -> String {
        self.engine.digest().to_string()
    }

    /// Advances `n` steps, ignoring the scenario's scripted events.
    #[pyo3(signature = (n = 1))]
    fn step(&mut self, n: u64) -> PyResult<()> {
        for _ in 0..n {
            self.engine.step(&mut NullSink).map_err(sim_err)?;
        }
        Ok(())
    }

    /// Runs the rest of the scenario, scripted events included; returns the summary JSON.
    fn run(&mut self) -> PyResult<String> {
        let summary = self.engine.run(&mut NullSink, None, &RunOptions::default()).map_err(sim_err)?;
        serde_json::to_string(&summary).map_err(value_err)
    }

    fn steer(&mut self, delta: f64) -> PyResult<()> {
        self.act(SteerAction::HeadingDelta(delta))
    }

    fn set_speed(&mut self, v_cmd: f64) -> PyResult<()> {
        self.act(SteerAction::SetSpeed(v_cmd))
    }

    fn set_gains(&mut self, gains_: (f64, f64, f64)) -> PyResult<()> {
        self.act(SteerAction::SetGains(gains(gains_)))
    }

    fn reset(&mut self) -> PyResult<()> {
        self.act(SteerAction::Reset)
    }

    /// Global poses `(x1, x2, x3)` per agent.
    fn poses(&self) -> Vec<(f64, f64, f64)> {
        self.engine.states().iter().map(|s| (s.x1, s.x2, s.x3)).collect()
    }

    /// Local-frame references `(x1s, x2s, x3s, u_ref, w_ref)` per agent.
    fn references(&self) -> Vec<(f64, f64, f64, f64, f64)> {
        self.engine.references().iter().map(|r| (r.x1s, r.x2s, r.x3s, r.u_ref, r.w_ref)).collect()
    }

    /// Current snapshot in the wire format's `state` payload shape.
    fn snapshot(&self) -> PyResult<String> {
        serde_json::to_string(&self.engine.snapshot()).map_err(value_err)
    }
}

#[pymodule]
fn robot_conga(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPath>()?;
    m.add_class::<PySimulator>()?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    m.add_function(wrap_pyfunction!(compute_error, m)?)?;
    m.add_function(wrap_pyfunction!(control_law, m)?)?;
    m.add_function(wrap_pyfunction!(closed_loop_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov_value, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov_rate, m)?)?;
    m.add_function(wrap_pyfunction!(is_positive_definite, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
