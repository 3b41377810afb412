//! Run traces, summary metrics and file exports (CSV for analysis, JSON lines for replay).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    settle_series, AppliedEvent, DroppedEvent, Engine, EventSettle, EventSource, RunOptions, RunSummary, Scenario,
    Settle, SimError, SimSnapshot, SnapshotSink,
};

pub const CSV_HEADER: &str = "k,t,agent,x1,x2,x3,x1s,x2s,x3s,e1,e2,e3,u,omega,u_ref,omega_ref,V";
const CSV_COLUMNS: usize = 17;
/// Rows between explicit flushes of streaming writers.
pub const FLUSH_EVERY: usize = 256;

/// Box inside which Lyapunov descent is checked by [`run_metrics`].
pub const DESCENT_REGION_ERROR: f64 = 0.2;
pub const DESCENT_REGION_HEADING: f64 = std::f64::consts::PI / 6.0;
/// Error norm below which a step is treated as at equilibrium.
pub const EQUILIBRIUM_NORM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("trace has no snapshots")]
    EmptyTrace,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimTrace {
    pub digest: String,
    pub spacing_d: f64,
    pub snapshots: Vec<SimSnapshot>,
    pub events: Vec<AppliedEvent>,
    pub dropped: Vec<DroppedEvent>,
}

impl SimTrace {
    pub fn new(digest: impl Into<String>, spacing_d: f64) -> Self {
        Self { digest: digest.into(), spacing_d, ..Self::default() }
    }
}

impl SnapshotSink for SimTrace {
    fn accept(&mut self, snapshot: &SimSnapshot) {
        self.snapshots.push(snapshot.clone());
    }
}

/// Runs a scenario headless and records every emitted snapshot.
pub fn simulate(scenario: Scenario) -> Result<(SimTrace, RunSummary), SimError> {
    simulate_with(scenario, None, &RunOptions::default())
}

pub fn simulate_with(
    scenario: Scenario,
    live: Option<&mut dyn EventSource>,
    options: &RunOptions,
) -> Result<(SimTrace, RunSummary), SimError> {
    let spacing_d = scenario.formation.spacing_d;
    let mut engine = Engine::new(scenario)?;
    let mut trace = SimTrace::new(engine.digest(), spacing_d);
    let summary = engine.run(&mut trace, live, options)?;
    trace.events = summary.events.clone();
    trace.dropped = summary.dropped.clone();
    Ok((trace, summary))
}

/// One CSV row; all coordinates in the local frame of its step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvRow {
    pub k: u64,
    pub t: f64,
    pub agent: usize,
    pub x: [f64; 3],
    pub reference: [f64; 3],
    pub error: [f64; 3],
    pub u: f64,
    pub omega: f64,
    pub u_ref: f64,
    pub omega_ref: f64,
    pub lyapunov: f64,
}

fn rows(trace: &SimTrace) -> impl Iterator<Item = CsvRow> + '_ {
    trace.snapshots.iter().flat_map(|s| {
        s.agents.iter().enumerate().map(move |(i, a)| CsvRow {
            k: s.k,
            t: s.t,
            agent: i,
            x: [a.state.x1, a.state.x2, a.state.x3],
            reference: [a.reference.x1s, a.reference.x2s, a.reference.x3s],
            error: a.error.as_array(),
            u: a.control.u,
            omega: a.control.omega,
            u_ref: a.reference.u_ref,
            omega_ref: a.reference.w_ref,
            lyapunov: a.lyapunov,
        })
    })
}

/// Writes the CSV export; floats carry 17 significant digits. Returns the data row count.
pub fn write_csv<W: Write>(trace: &SimTrace, out: W) -> Result<usize, TelemetryError> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{CSV_HEADER}")?;
    let mut n = 0;
    for r in rows(trace) {
        write!(out, "{},{:.16e},{}", r.k, r.t, r.agent)?;
        let tail = [r.u, r.omega, r.u_ref, r.omega_ref, r.lyapunov];
        for v in r.x.iter().chain(&r.reference).chain(&r.error).chain(&tail) {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
        n += 1;
        if n % FLUSH_EVERY == 0 {
            out.flush()?;
        }
    }
    out.flush()?;
    Ok(n)
}

pub fn export_csv(trace: &SimTrace, path: impl AsRef<Path>) -> Result<usize, TelemetryError> {
    write_csv(trace, File::create(path)?)
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<CsvRow>, TelemetryError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(CSV_HEADER) {
        return Err(TelemetryError::Parse { line: 1, message: "missing or unexpected header".into() });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        let bad = |message: String| TelemetryError::Parse { line: line_no, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != CSV_COLUMNS {
            return Err(bad(format!("expected {CSV_COLUMNS} columns, found {}", cols.len())));
        }
        let f = |j: usize| cols[j].parse::<f64>().map_err(|e| bad(format!("column {j}: {e}")));
        out.push(CsvRow {
            k: cols[0].parse().map_err(|e| bad(format!("column 0: {e}")))?,
            t: f(1)?,
            agent: cols[2].parse().map_err(|e| bad(format!("column 2: {e}")))?,
            x: [f(3)?, f(4)?, f(5)?],
            reference: [f(6)?, f(7)?, f(8)?],
            error: [f(9)?, f(10)?, f(11)?],
            u: f(12)?,
            omega: f(13)?,
            u_ref: f(14)?,
            omega_ref: f(15)?,
            lyapunov: f(16)?,
        });
    }
    Ok(out)
}

pub fn import_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>, TelemetryError> {
    read_csv(BufReader::new(File::open(path)?))
}

/// One line of a JSON-lines trace. `state` lines share the gateway's wire shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "lowercase")]
pub enum TraceRecord {
    Header { digest: String, spacing_d: f64 },
    State(SimSnapshot),
    Event(AppliedEvent),
    Dropped(DroppedEvent),
}

/// Streams snapshots as `state` lines, flushing every [`FLUSH_EVERY`] lines.
pub struct JsonlSink<W: Write> {
    out: BufWriter<W>,
    lines: usize,
    error: Option<io::Error>,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W, digest: &str, spacing_d: f64) -> io::Result<Self> {
        let mut sink = Self { out: BufWriter::new(out), lines: 0, error: None };
        sink.write(&TraceRecord::Header { digest: digest.into(), spacing_d })?;
        Ok(sink)
    }

    fn write(&mut self, rec: &TraceRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        if self.lines.is_multiple_of(FLUSH_EVERY) {
            self.out.flush()?;
        }
        Ok(())
    }

    /// Appends the event log and flushes; reports the first write error, if any.
    pub fn finish(mut self, events: &[AppliedEvent], dropped: &[DroppedEvent]) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        for e in events {
            self.write(&TraceRecord::Event(*e))?;
        }
        for d in dropped {
            self.write(&TraceRecord::Dropped(d.clone()))?;
        }
        self.out.flush()
    }
}

impl<W: Write> SnapshotSink for JsonlSink<W> {
    fn accept(&mut self, snapshot: &SimSnapshot) {
        if self.error.is_none() {
            if let Err(e) = self.write(&TraceRecord::State(snapshot.clone())) {
                self.error = Some(e);
            }
        }
    }
}

pub fn write_jsonl<W: Write>(trace: &SimTrace, out: W) -> Result<(), TelemetryError> {
    let mut sink = JsonlSink::new(out, &trace.digest, trace.spacing_d)?;
    for s in &trace.snapshots {
        sink.accept(s);
    }
    sink.finish(&trace.events, &trace.dropped)?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<SimTrace, TelemetryError> {
    let mut trace = SimTrace::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| TelemetryError::Parse { line: i + 1, message: e.to_string() })?;
        match rec {
            TraceRecord::Header { digest, spacing_d } => {
                trace.digest = digest;
                trace.spacing_d = spacing_d;
            }
            TraceRecord::State(s) => trace.snapshots.push(s),
            TraceRecord::Event(e) => trace.events.push(e),
            TraceRecord::Dropped(d) => trace.dropped.push(d),
        }
    }
    Ok(trace)
}

/// Per-agent settling after the event applied at `event_step`, measured up to the next event.
pub fn settle_steps(trace: &SimTrace, event_step: u64, threshold_frac: f64) -> Result<Vec<Settle>, TelemetryError> {
    let (first, last) = match (trace.snapshots.first(), trace.snapshots.last()) {
        (Some(a), Some(b)) => (a.k, b.k),
        _ => return Err(TelemetryError::EmptyTrace),
    };
    if event_step < first || event_step > last {
        return Err(TelemetryError::InvalidArgument(format!("event step {event_step} outside trace [{first}, {last}]")));
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(TelemetryError::InvalidArgument(format!("threshold fraction {threshold_frac} outside (0, 1)")));
    }
    let end = trace.events.iter().map(|e| e.k).filter(|&k| k > event_step).min().unwrap_or(u64::MAX);
    let window: Vec<&SimSnapshot> = trace.snapshots.iter().filter(|s| s.k >= event_step && s.k < end).collect();
    let n = trace.snapshots[0].agents.len();
    Ok((0..n)
        .map(|i| {
            let series: Vec<(u64, f64)> = window.iter().map(|s| (s.k, s.agents[i].error_norm)).collect();
            settle_series(&series, event_step, threshold_frac)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub settle: Vec<EventSettle>,
    pub peak_error: Vec<f64>,
    pub rms_error: Vec<f64>,
    pub max_spacing_deviation: f64,
    /// Snapshot pairs inside the descent region where `V` failed to decrease.
    pub lyapunov_violations: usize,
}

fn in_descent_region(a: &crate::sim::AgentSnapshot) -> bool {
    a.error.as_array().iter().all(|v| v.abs() <= DESCENT_REGION_ERROR) && a.reference.x3s.abs() <= DESCENT_REGION_HEADING
}

pub fn run_metrics(trace: &SimTrace) -> Result<RunMetrics, TelemetryError> {
    let first = trace.snapshots.first().ok_or(TelemetryError::EmptyTrace)?;
    let n = first.agents.len();
    let count = trace.snapshots.len() as f64;
    let mut peak = vec![0.0f64; n];
    let mut sq = vec![0.0f64; n];
    let mut spacing = 0.0f64;
    for s in &trace.snapshots {
        for (i, a) in s.agents.iter().enumerate() {
            peak[i] = peak[i].max(a.error_norm);
            sq[i] += a.error_norm * a.error_norm;
        }
        for g in &s.gaps {
            spacing = spacing.max((g - trace.spacing_d).abs());
        }
    }
    let mut violations = 0;
    for w in trace.snapshots.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if trace.events.iter().any(|e| e.k > a.k && e.k <= b.k) {
            continue;
        }
        for (pa, pb) in a.agents.iter().zip(&b.agents) {
            if pa.error_norm > EQUILIBRIUM_NORM && in_descent_region(pa) && pb.lyapunov > pa.lyapunov + 1e-12 {
                violations += 1;
            }
        }
    }
    let last_k = trace.snapshots.last().map_or(0, |s| s.k);
    let settle = trace
        .events
        .iter()
        .filter(|e| e.k <= last_k && e.k >= first.k)
        .map(|e| Ok(EventSettle { k: e.k, action: e.action, per_agent: settle_steps(trace, e.k, 0.05)? }))
        .collect::<Result<_, TelemetryError>>()?;
    Ok(RunMetrics {
        settle,
        peak_error: peak,
        rms_error: sq.iter().map(|s| (s / count).sqrt()).collect(),
        max_spacing_deviation: spacing,
        lyapunov_violations: violations,
    })
}
