use std::io::BufReader;

use conga_core::dynamics::wrap_angle;
use conga_core::sim::{Engine, RunOptions, Scenario};
use conga_core::telemetry::{
    export_csv, import_csv, read_jsonl, run_metrics, simulate, write_csv, write_jsonl, JsonlSink, SimTrace, CSV_HEADER,
};

fn short(name: &str, duration: f64) -> Scenario {
    let mut s = Scenario::preset(name).unwrap();
    s.duration = duration;
    s
}

#[test]
fn one_row_per_agent_and_step() {
    let (trace, _) = simulate(short("turtlebot3", 0.1)).unwrap();
    assert_eq!(trace.snapshots.len(), 100);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("trace.csv");
    assert_eq!(export_csv(&trace, &file).unwrap(), 300);
    let text = std::fs::read_to_string(&file).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 301);
}

#[test]
fn csv_round_trip_is_bit_exact_and_self_consistent() {
    let (trace, _) = simulate(short("mixed", 2.5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("trace.csv");
    export_csv(&trace, &file).unwrap();
    let rows = import_csv(&file).unwrap();
    let n = trace.snapshots[0].agents.len();
    assert_eq!(rows.len(), trace.snapshots.len() * n);
    for (row, (s, a)) in rows.iter().zip(trace.snapshots.iter().flat_map(|s| s.agents.iter().map(move |a| (s, a)))) {
        assert_eq!((row.k, row.t.to_bits()), (s.k, s.t.to_bits()));
        let want = [a.state.x1, a.state.x2, a.state.x3, a.reference.x1s, a.reference.x2s, a.reference.x3s];
        let got = [row.x[0], row.x[1], row.x[2], row.reference[0], row.reference[1], row.reference[2]];
        assert_eq!(got.map(f64::to_bits), want.map(f64::to_bits));
        assert_eq!(row.error.map(f64::to_bits), a.error.as_array().map(f64::to_bits));
        assert_eq!(
            [row.u, row.omega, row.u_ref, row.omega_ref, row.lyapunov].map(f64::to_bits),
            [a.control.u, a.control.omega, a.reference.u_ref, a.reference.w_ref, a.lyapunov].map(f64::to_bits)
        );
        let e = [row.x[0] - row.reference[0], row.x[1] - row.reference[1], wrap_angle(row.x[2] - row.reference[2]).unwrap()];
        for (r, c) in e.iter().zip(row.error) {
            assert!((r - c).abs() <= 1e-15);
        }
    }
}

#[test]
fn metrics_survive_serialization() {
    let (trace, _) = simulate(short("mixed", 5.0)).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&trace, &mut buf).unwrap();
    let back = read_jsonl(BufReader::new(&buf[..])).unwrap();
    assert_eq!(back, trace);
    assert_eq!(run_metrics(&back).unwrap(), run_metrics(&trace).unwrap());
}

#[test]
fn streamed_jsonl_matches_batch_export() {
    let scenario = short("turtlebot3", 0.5);
    let (trace, _) = simulate(scenario.clone()).unwrap();
    let mut engine = Engine::new(scenario.clone()).unwrap();
    let digest = engine.digest().to_string();
    let mut streamed = Vec::new();
    let mut sink = JsonlSink::new(&mut streamed, &digest, scenario.formation.spacing_d).unwrap();
    engine.run(&mut sink, None, &RunOptions::default()).unwrap();
    sink.finish(engine.events(), engine.dropped()).unwrap();
    let mut batch = Vec::new();
    write_jsonl(&trace, &mut batch).unwrap();
    assert_eq!(streamed, batch);
}

#[test]
fn equilibrium_metrics_are_zero() {
    let mut s = short("turtlebot3", 1.0);
    s.steering_script.clear();
    let (trace, _) = simulate(s).unwrap();
    let m = run_metrics(&trace).unwrap();
    assert!(m.peak_error.iter().all(|&p| p <= 1e-9));
    assert_eq!(m.lyapunov_violations, 0);
    assert!(m.settle.is_empty());
}

#[test]
fn metrics_are_pure() {
    let (trace, _) = simulate(short("laikago", 2.0)).unwrap();
    let a = run_metrics(&trace).unwrap();
    let b = run_metrics(&trace.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.settle.len(), 1);
    assert_eq!(a.settle[0].k, 100);
}

#[test]
fn empty_trace_exports_header_only() {
    let mut buf = Vec::new();
    assert_eq!(write_csv(&SimTrace::default(), &mut buf).unwrap(), 0);
    assert_eq!(buf, format!("{CSV_HEADER}\n").into_bytes());
}
