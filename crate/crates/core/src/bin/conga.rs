use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use conga_core::gateway::{serve_with, GatewayError, ServeOptions};
use conga_core::sim::{RunSummary, Scenario, Settle, SimError, LIVE_EMIT_EVERY};
use conga_core::stability::{certify_region, Certification, StabilityRegion};
use conga_core::telemetry::{export_csv, run_metrics, simulate, write_jsonl, RunMetrics, SimTrace};

#[derive(Parser)]
#[command(name = "conga", version, about = "Leader-follower formation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and export its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_jsonl: Option<PathBuf>,
        /// JSON report with the run summary and metrics.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check Lyapunov decrease over a region for every gain set in a scenario.
    Certify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        region: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve live snapshots and accept steering over WebSocket.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        #[arg(long, default_value_t = LIVE_EMIT_EVERY)]
        emit_every: u64,
    },
    /// Run a packaged scenario.
    Demo {
        #[arg(long, value_enum)]
        preset: Preset,
        /// Print the scenario JSON instead of running it.
        #[arg(long)]
        print_scenario: bool,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Turtlebot3,
    Laikago,
    Mixed,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Turtlebot3 => "turtlebot3",
            Preset::Laikago => "laikago",
            Preset::Mixed => "mixed",
        }
    }
}

enum Failure {
    Scenario(String),
    Runtime(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_scenario_error() {
            Failure::Scenario(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Scenario(format!("{}: {e}", path.display())))?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| Failure::Scenario(format!("{}: {e}", path.display())))?;
    scenario.validate()?;
    Ok(scenario)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Report<'a> {
    summary: &'a RunSummary,
    metrics: RunMetrics,
}

fn settle_text(s: &Settle) -> String {
    s.steps().map_or_else(|| "never".to_string(), |n| n.to_string())
}

fn print_summary(summary: &RunSummary) {
    println!("digest {}", summary.digest);
    println!("steps {}{}", summary.steps, if summary.ended_early { " (ended early)" } else { "" });
    let peaks: Vec<String> = summary.peak_error.iter().map(|p| format!("{p:.6}")).collect();
    println!("peak |e| per agent: {}", peaks.join(" "));
    for ev in &summary.settle {
        let per: Vec<String> = ev.per_agent.iter().map(settle_text).collect();
        println!("event at step {} {:?}: settle steps per agent {}", ev.k, ev.action, per.join(" "));
    }
    println!("max spacing deviation {:.6e}", summary.max_spacing_deviation);
    for d in &summary.dropped {
        println!("dropped {:?} at step {}: {}", d.action, d.k, d.reason);
    }
}

fn export(trace: &SimTrace, csv: Option<&Path>, jsonl: Option<&Path>) -> Result<(), Failure> {
    if let Some(p) = csv {
        let n = export_csv(trace, p).map_err(runtime)?;
        println!("wrote {n} rows to {}", p.display());
    }
    if let Some(p) = jsonl {
        let f = fs::File::create(p).map_err(runtime)?;
        write_jsonl(trace, f).map_err(runtime)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { scenario, out_csv, out_jsonl, report } => {
            let scenario = load_scenario(&scenario)?;
            let (trace, summary) = simulate(scenario)?;
            print_summary(&summary);
            export(&trace, out_csv.as_deref(), out_jsonl.as_deref())?;
            if let Some(p) = report {
                let metrics = run_metrics(&trace).map_err(runtime)?;
                write_json(&p, &Report { summary: &summary, metrics })?;
            }
            Ok(())
        }
        Command::Certify { scenario, region, samples, report } => {
            let scenario = load_scenario(&scenario)?;
            let text = fs::read_to_string(&region).map_err(|e| Failure::Scenario(format!("{}: {e}", region.display())))?;
            let region: StabilityRegion =
                serde_json::from_str(&text).map_err(|e| Failure::Scenario(format!("region: {e}")))?;
            region.validate().map_err(|e| Failure::Scenario(e.to_string()))?;
            let mut results = std::collections::BTreeMap::new();
            for (platform, gains) in &scenario.gains {
                let c = certify_region(&region, gains, &scenario.weights, samples).map_err(|e| Failure::Scenario(e.to_string()))?;
                match &c {
                    Certification::Certified { bounds, .. } => println!(
                        "{platform}: certified alpha={:.6} beta={:.6} rho={:.6}",
                        bounds.alpha, bounds.beta, bounds.rho
                    ),
                    Certification::Counterexample { worst, violations, .. } => println!(
                        "{platform}: counterexample ({violations} samples with dV/dt >= 0), worst e=({:.4}, {:.4}, {:.4}) x3*={:.4} u*={:.4} dV/dt={:.3e}",
                        worst.e.e1, worst.e.e2, worst.e.e3, worst.x3s, worst.u_ref, worst.rate
                    ),
                }
                results.insert(platform.clone(), c);
            }
            if let Some(p) = report {
                write_json(&p, &results)?;
            }
            if results.values().all(Certification::is_certified) {
                Ok(())
            } else {
                Err(Failure::Runtime("certification failed".into()))
            }
        }
        Command::Serve { scenario, bind, emit_every } => {
            let scenario = load_scenario(&scenario)?;
            let options = ServeOptions { real_time: true, emit_every };
            let handle = serve_with(scenario, &bind, options).map_err(|e| match e {
                GatewayError::Scenario(s) => Failure::from(s),
                other => Failure::Runtime(other.to_string()),
            })?;
            println!("listening on ws://{}", handle.addr());
            handle.join().map(|_| ()).map_err(Failure::from)
        }
        Command::Demo { preset, print_scenario, out_csv } => {
            let scenario = Scenario::preset(preset.name()).expect("packaged preset");
            if print_scenario {
                println!("{}", serde_json::to_string_pretty(&scenario).map_err(runtime)?);
                return Ok(());
            }
            let gains: Vec<String> = scenario.gains.iter().map(|(k, g)| format!("{k} ({}, {}, {})", g.lambda1, g.lambda2, g.lambda3)).collect();
            println!("preset {} with gains {}", preset.name(), gains.join(", "));
            let (trace, summary) = simulate(scenario)?;
            print_summary(&summary);
            export(&trace, out_csv.as_deref(), None)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
