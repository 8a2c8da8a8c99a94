// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 clean, 1 usage, config or replay mismatch, 2 violations
//! detected, 3 attack succeeded.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use realm_devsim::harness::compare::compare_modes;
use realm_devsim::harness::config::ScenarioConfig;
use realm_devsim::harness::engine::{run, RunResult};
use realm_devsim::harness::replay::replay_file;
use realm_devsim::harness::scenarios;
use realm_devsim::harness::trace::TraceEvent;
use realm_devsim::hypervisor::HypStrategy;
use realm_devsim::types::Mode;

#[derive(Parser)]
#[command(name = "realm-devsim", version, about = "Simulate device attach to realm VMs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Overrides {
    /// bn, br or dmi.
    #[arg(long)]
    mode: Option<Mode>,
    /// Host strategy, e.g. `benign`, `inject_fake:50`, `stall_scheduling:30`.
    #[arg(long)]
    strategy: Option<HypStrategy>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, mut cfg: ScenarioConfig) -> ScenarioConfig {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario.
    Run {
        config: PathBuf,
        #[command(flatten)]
        over: Overrides,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the metrics report as JSON.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run one scenario under several modes and tabulate the metrics.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "bn,br,dmi")]
        modes: Vec<Mode>,
        #[arg(long)]
        json: bool,
    },
    /// Re-run a scenario and compare with a recorded trace.
    Replay {
        config: PathBuf,
        trace: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Run every host strategy against its workload.
    Attacks {
        #[arg(long, default_value = "dmi")]
        mode: Mode,
        #[arg(long)]
        json: bool,
    },
    /// Print a built-in scenario as a config file.
    Example {
        /// keyboard, storm, counter, burst, two-wave, wcnss, mali or dma-bfs.
        name: String,
        #[arg(long, default_value = "dmi")]
        mode: Mode,
    },
}

fn builtin(name: &str, mode: Mode) -> anyhow::Result<ScenarioConfig> {
    Ok(match name {
        "keyboard" => scenarios::keyboard(mode, 100),
        "storm" => scenarios::storm(true).with_mode(mode),
        "counter" => scenarios::counter(mode, 10),
        "burst" => scenarios::burst(mode),
        "two-wave" => scenarios::two_wave(mode),
        "wcnss" => scenarios::wcnss(mode),
        "mali" => scenarios::mali(mode),
        "dma-bfs" => scenarios::dma_bfs(mode),
        other => bail!("unknown example `{other}`"),
    })
}

fn violations(r: &RunResult) -> Vec<String> {
    r.trace
        .events()
        .filter_map(|e| match e {
            TraceEvent::Violation { check, detail, .. } => Some(format!("{check:?}: {detail}")),
            _ => None,
        })
        .collect()
}

fn summary(r: &RunResult) -> serde_json::Value {
    json!({
        "name": r.name,
        "mode": r.mode,
        "status": r.status,
        "metrics": r.metrics,
        "violations": violations(r),
        "divergences": r.divergences,
        "measurements": r.measurements,
        "observables": r.observables,
    })
}

fn print_text(r: &RunResult) {
    println!("{} [{}]: {:?}", r.name, r.mode, r.status);
    for (k, v) in r.metrics.fields() {
        println!("  {k:<22}{v}");
    }
    for v in violations(r) {
        println!("  violation {v}");
    }
    for d in &r.divergences {
        println!("  diverged {d}");
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<u8> {
    match cmd {
        Cmd::Run {
            config,
            over,
            trace,
            metrics,
            json,
        } => {
            let cfg = over.apply(ScenarioConfig::load(&config).with_context(|| config.display().to_string())?);
            cfg.validate()?;
            let r = run(&cfg)?;
            if let Some(p) = trace {
                let f = File::create(&p).with_context(|| p.display().to_string())?;
                r.trace.write_jsonl(BufWriter::new(f))?;
            }
            if let Some(p) = metrics {
                std::fs::write(&p, serde_json::to_string_pretty(&r.metrics)?)
                    .with_context(|| p.display().to_string())?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&summary(&r))?);
            } else {
                print_text(&r);
            }
            Ok(r.status.code() as u8)
        }
        Cmd::Compare { config, modes, json } => {
            let cfg = ScenarioConfig::load(&config).with_context(|| config.display().to_string())?;
            let report = compare_modes(&cfg, &modes)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            Ok(0)
        }
        Cmd::Replay { config, trace, over } => {
            let cfg = over.apply(ScenarioConfig::load(&config).with_context(|| config.display().to_string())?);
            let rep = replay_file(&cfg, &trace)?;
            if rep.identical {
                println!("identical: {} lines", rep.replayed_len);
                return Ok(0);
            }
            println!("diverged at step {}", rep.diverged_at.unwrap_or_default());
            println!("  recorded: {}", rep.recorded_line.as_deref().unwrap_or("<end>"));
            println!("  replayed: {}", rep.replayed_line.as_deref().unwrap_or("<end>"));
            Ok(1)
        }
        Cmd::Attacks { mode, json } => {
            let mut rows = Vec::new();
            for cfg in scenarios::attack_suite(mode) {
                let r = run(&cfg)?;
                rows.push(json!({
                    "name": r.name,
                    "status": r.status,
                    "violations": violations(&r),
                    "divergences": r.divergences,
                }));
                if !json {
                    println!(
                        "{:<40}{:<22}violations={} divergences={}",
                        r.name,
                        format!("{:?}", r.status),
                        r.violations(),
                        r.divergences.len()
                    );
                }
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            }
            Ok(0)
        }
        Cmd::Example { name, mode } => {
            println!("{}", serde_json::to_string_pretty(&builtin(&name, mode)?)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
