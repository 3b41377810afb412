//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::time::{Duration, Instant};

use conga_core::control::{closed_loop_rhs, control_law, error_rhs, ErrorVector, Gains};
use conga_core::dynamics::{step, ActuationModel, AgentState, ControlInput};
use conga_core::path::{FrameTransform, PathModel, Point, SplineKind};
use conga_core::reference::ReferenceState;
use conga_core::sim::{Engine, Pose, RunOptions, Scenario, Settle, SimSnapshot, SteerAction, SteerEvent};
use conga_core::stability::{certify_region, Certification, LyapunovWeights, StabilityRegion};
use conga_core::telemetry::{settle_steps, simulate, write_csv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBSTITUTION_TOL: f64 = 1e-10;
const SUBSTITUTION_BUDGET: Duration = Duration::from_secs(1);
const CERTIFY_SAMPLES: usize = 100_000;
const CERTIFY_BUDGET: Duration = Duration::from_secs(10);
const QUADRUPED_SETTLE_MAX: u64 = 300;
const QUADRUPED_BUDGET: Duration = Duration::from_secs(5);
const SPACING_FRACTION: f64 = 0.02;
const RK4_MIN_RATIO: f64 = 8.0;
const TRANSPARENCY_TOL: f64 = 1e-6;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn substitution_equivalence() -> Verdict {
    let sixty = 60f64.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x3s = rng.gen_range(-sixty..=sixty);
        let e3 = rng.gen_range((-sixty - x3s).max(-0.5)..=(sixty - x3s).min(0.5));
        let e = ErrorVector::new(rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5), e3);
        let r = ReferenceState { x1s: 0.0, x2s: 0.0, x3s, u_ref: rng.gen_range(0.05..=1.0), w_ref: rng.gen_range(-1.0..1.0) };
        let g = Gains::new(rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
        let numeric = error_rhs(&e, &r, control_law(&e, &r, &g).map_err(|x| x.to_string())?);
        let analytic = closed_loop_rhs(&e, &r, &g).map_err(|x| x.to_string())?;
        for (a, b) in numeric.as_array().iter().zip(analytic.as_array()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst <= SUBSTITUTION_TOL && elapsed < SUBSTITUTION_BUDGET,
        format!("max componentwise gap {worst:.2e} over 10^4 samples in {elapsed:.2?}"),
    )
}

fn lyapunov_certification() -> Verdict {
    let region =
        StabilityRegion { e1_max: 0.2, e2_max: 0.2, e3_max: 0.2, x3s_max: 30f64.to_radians(), u_ref_range: [0.1, 0.5] };
    let start = Instant::now();
    let c = certify_region(&region, &Gains::TURTLEBOT3, &LyapunovWeights::new(2.0, 3.0), CERTIFY_SAMPLES)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    match c {
        Certification::Certified { bounds, samples } => check(
            bounds.alpha > 0.0 && bounds.beta > 0.0 && bounds.rho > 0.0 && elapsed < CERTIFY_BUDGET,
            format!("alpha={:.4} beta={:.4} rho={:.4} over {samples} samples in {elapsed:.2?}", bounds.alpha, bounds.beta, bounds.rho),
        ),
        Certification::Counterexample { worst, violations, samples } => Err(format!(
            "{violations}/{samples} samples with dV/dt >= 0; worst e=({:.3}, {:.3}, {:.3}) x3*={:.3} u*={:.3} dV/dt={:.3e}",
            worst.e.e1, worst.e.e2, worst.e.e3, worst.x3s, worst.u_ref, worst.rate
        )),
    }
}

fn settle_after_turn(preset: &str) -> Result<(Vec<Settle>, Duration), String> {
    let scenario = Scenario::preset(preset).ok_or("missing preset")?;
    let start = Instant::now();
    let (trace, _) = simulate(scenario).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let event = trace.events.first().ok_or("no event applied")?;
    Ok((settle_steps(&trace, event.k, 0.05).map_err(|e| e.to_string())?, elapsed))
}

fn describe(s: &[Settle]) -> String {
    s.iter().map(|v| v.steps().map_or("never".into(), |n| n.to_string())).collect::<Vec<_>>().join("/")
}

fn quadruped_settle() -> Verdict {
    let (settle, elapsed) = settle_after_turn("laikago")?;
    let ok = settle.iter().all(|s| s.steps().is_some_and(|n| n <= QUADRUPED_SETTLE_MAX));
    check(
        ok && elapsed < QUADRUPED_BUDGET,
        format!("settle steps per agent {} (limit {QUADRUPED_SETTLE_MAX}), run took {elapsed:.2?}", describe(&settle)),
    )
}

fn wheeled_faster_than_quadruped() -> Verdict {
    let (wheeled, _) = settle_after_turn("turtlebot3")?;
    let (legged, _) = settle_after_turn("laikago")?;
    let faster = |a: &Settle, b: &Settle| match (a.steps(), b.steps()) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    };
    let ok = wheeled.len() == legged.len() && wheeled.iter().zip(&legged).all(|(a, b)| faster(a, b));
    check(ok, format!("turtlebot3 {} vs laikago {}", describe(&wheeled), describe(&legged)))
}

fn spacing_invariance() -> Verdict {
    let scenario = Scenario::preset("mixed").ok_or("missing preset")?;
    let d = scenario.formation.spacing_d;
    let steps = scenario.total_steps();
    let events = scenario.steering_script.len();
    let (trace, _) = simulate(scenario).map_err(|e| e.to_string())?;
    let worst = trace.snapshots.iter().flat_map(|s| s.gaps.iter()).map(|g| (g - d).abs()).fold(0.0, f64::max);
    check(
        worst <= SPACING_FRACTION * d && steps >= 10_000 && trace.events.len() == events,
        format!("max |gap - d| = {worst:.3e} m ({:.2}% of d) over {steps} steps, {} events", 100.0 * worst / d, trace.events.len()),
    )
}

fn circle_error(dt: f64) -> f64 {
    let n = (4.0 / dt).round() as usize;
    let mut s = AgentState::default();
    for _ in 0..n {
        s = step(&s, ControlInput::new(1.0, 1.0), &ActuationModel::ideal(), dt).unwrap();
    }
    let t = n as f64 * dt;
    ((s.x1 - t.sin()).powi(2) + (s.x2 - (1.0 - t.cos())).powi(2)).sqrt()
}

fn integrator_order() -> Verdict {
    let (coarse, fine) = (circle_error(0.05), circle_error(0.025));
    let ratio = coarse / fine;
    check(ratio >= RK4_MIN_RATIO, format!("error {coarse:.3e} -> {fine:.3e}, ratio {ratio:.2}"))
}

fn determinism() -> Verdict {
    let csv = || -> Result<Vec<u8>, String> {
        let (trace, _) = simulate(Scenario::preset("mixed").ok_or("missing preset")?).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_csv(&trace, &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let (a, b) = (csv()?, csv()?);
    check(a == b, format!("two CSV exports of {} bytes {}", a.len(), if a == b { "identical" } else { "differ" }))
}

fn global_track(snaps: &[SimSnapshot]) -> Vec<Vec<Pose>> {
    snaps.iter().map(|s| s.agents.iter().map(|a| a.global_pose(&s.frame)).collect()).collect()
}

fn frame_rotation_transparency() -> Verdict {
    let climb = 50f64.to_radians();
    let turn_at = 0.1;
    let mut steep = Scenario::preset("turtlebot3").ok_or("missing preset")?;
    steep.duration = 3.0;
    steep.agents.iter_mut().for_each(|a| a.actuation = ActuationModel::ideal());
    steep.initial_path.waypoints = (0..=12).map(|i| Point::new(i as f64, i as f64 * climb.tan())).collect();
    steep.initial_path.leader_x = Some(2.0);
    steep.steering_script = vec![SteerEvent { t: turn_at, action: SteerAction::HeadingDelta(15f64.to_radians()) }];

    // Author the same line in the frame the steep run rotates into: turned by the climb
    // angle about the leader's position when the turn arrives.
    let v = steep.formation.v_cmd;
    let run_x = 2.0 + v * turn_at * climb.cos();
    let frame = FrameTransform::new(climb, Point::new(run_x, run_x * climb.tan()));
    let mut flat = steep.clone();
    flat.initial_path.waypoints = steep.initial_path.waypoints.iter().map(|p| frame.to_local(*p)).collect();
    flat.initial_path.frame = frame;
    flat.initial_path.leader_x = Some(frame.to_local(Point::new(2.0, 2.0 * climb.tan())).x);

    let collect = |s: Scenario| -> Result<Vec<SimSnapshot>, String> {
        let mut out = Vec::new();
        Engine::new(s).map_err(|e| e.to_string())?.run(&mut out, None, &RunOptions::default()).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let (a, b) = (collect(steep)?, collect(flat)?);
    let rotated = a.last().is_some_and(|s| (s.frame.rotation - climb).abs() < 1e-9);
    let mut worst = 0.0f64;
    for (pa, pb) in global_track(&a).iter().zip(global_track(&b)) {
        for (x, y) in pa.iter().zip(&pb) {
            worst = worst.max(((x.x1 - y.x1).powi(2) + (x.x2 - y.x2).powi(2)).sqrt());
        }
    }
    check(
        rotated && a.len() == b.len() && worst <= TRANSPARENCY_TOL,
        format!("frame rotated: {rotated}; max global position gap {worst:.3e} m over {} snapshots", a.len()),
    )
}

/// Waypoints one metre apart whose chord headings are perturbed around a gentle climb.
fn perturbed_heading_fixture() -> Vec<Point> {
    let headings = [0.0, 12.0, -8.0, 20.0, 5.0, -15.0, 10.0, 25.0, 0.0, -10.0, 15.0];
    let mut pts = vec![Point::new(0.0, 0.0)];
    for h in headings {
        let last = *pts.last().unwrap();
        pts.push(Point::new(last.x + 1.0, last.y + f64::to_radians(h).tan()));
    }
    pts
}

fn max_curvature(path: &PathModel) -> f64 {
    let (lo, hi) = path.domain();
    (0..=4000).map(|i| lo + (hi - lo) * i as f64 / 4000.0).map(|x| path.curvature(x).unwrap().abs()).fold(0.0, f64::max)
}

fn interpolation_comparison() -> Verdict {
    let pts = perturbed_heading_fixture();
    let spline = PathModel::build(pts.clone(), SplineKind::ClampedCubicBSpline).map_err(|e| e.to_string())?;
    let poly = PathModel::build(pts, SplineKind::Barycentric).map_err(|e| e.to_string())?;
    let (ks, kp) = (max_curvature(&spline), max_curvature(&poly));
    check(ks <= kp, format!("max |curvature| B-spline {ks:.3} vs barycentric {kp:.3} (1/m)"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("substitution equivalence", substitution_equivalence),
        ("Lyapunov certification (delta=2, delta1=3)", lyapunov_certification),
        ("quadruped settle within 300 steps", quadruped_settle),
        ("wheeled settles faster than quadruped", wheeled_faster_than_quadruped),
        ("spacing invariance", spacing_invariance),
        ("integrator order", integrator_order),
        ("determinism", determinism),
        ("frame-rotation transparency", frame_rotation_transparency),
        ("interpolation comparison", interpolation_comparison),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
